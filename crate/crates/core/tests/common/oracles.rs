//! Direct, unoptimized reference implementations.

use std::collections::VecDeque;

use lesion_cascade::{Dims, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inside(d: Dims, p: [isize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d.0[a])
}

fn at(d: Dims, p: [isize; 3]) -> usize {
    d.index(p[0] as usize, p[1] as usize, p[2] as usize)
}

fn coords(d: Dims, i: usize) -> [isize; 3] {
    let x = i % d.0[0];
    let y = (i / d.0[0]) % d.0[1];
    let z = i / (d.0[0] * d.0[1]);
    [x as isize, y as isize, z as isize]
}

/// Random mask: i.i.d. voxels, or a union of random boxes for blobby shapes.
pub fn random_mask(rng: &mut ChaCha8Rng, d: Dims, spacing: [f64; 3]) -> Mask {
    let mut data = vec![0u8; d.len()];
    if rng.random_bool(0.5) {
        let p = rng.random_range(0.02..0.5);
        data.iter_mut().for_each(|v| *v = u8::from(rng.random_bool(p)));
    } else {
        for _ in 0..rng.random_range(1..=4) {
            let lo: [usize; 3] = [0, 1, 2].map(|a| rng.random_range(0..d.0[a]));
            let hi: [usize; 3] = [0, 1, 2].map(|a| rng.random_range(lo[a]..d.0[a].min(lo[a] + 8)));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        data[d.index(x, y, z)] = 1;
                    }
                }
            }
        }
    }
    Mask::new(d, data, spacing).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const FACES: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Linear indices of foreground voxels touching background or the volume edge.
pub fn surface_voxels(m: &Mask) -> Vec<usize> {
    let d = m.dims;
    (0..d.len())
        .filter(|&i| {
            m.data[i] == 1
                && FACES.iter().any(|f| {
                    let c = coords(d, i);
                    let q = [c[0] + f[0], c[1] + f[1], c[2] + f[2]];
                    !inside(d, q) || m.data[at(d, q)] == 0
                })
        })
        .collect()
}

fn directed(d: Dims, from: &[usize], to: &[usize], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&i| {
            let a = coords(d, i);
            to.iter()
                .map(|&j| {
                    let b = coords(d, j);
                    let dx = (a[0] - b[0]) as f64 * spacing[0];
                    let dy = (a[1] - b[1]) as f64 * spacing[1];
                    let dz = (a[2] - b[2]) as f64 * spacing[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// `(assd, mssd, rmsd)` by exhaustive pairwise search.
pub fn brute_surface_distances(a: &Mask, b: &Mask, spacing: [f64; 3]) -> (f64, f64, f64) {
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    let mut all = directed(a.dims, &sa, &sb, spacing);
    all.extend(directed(a.dims, &sb, &sa, spacing));
    let n = all.len() as f64;
    let assd = all.iter().sum::<f64>() / n;
    let mssd = all.iter().copied().fold(0.0, f64::max);
    let rmsd = (all.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (assd, mssd, rmsd)
}

fn neighbours(full: bool) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let k = dx.abs() + dy.abs() + dz.abs();
                if k > 0 && (full || k == 1) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Breadth-first labeling; keeps the largest component, earliest in scan order on ties.
pub fn flood_fill_largest(m: &Mask, full_connectivity: bool) -> Mask {
    let d = m.dims;
    let offsets = neighbours(full_connectivity);
    let mut seen = vec![false; d.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..d.len() {
        if m.data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let c = coords(d, i);
            for o in &offsets {
                let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if inside(d, q) {
                    let j = at(d, q);
                    if m.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                        queue.push_back(j);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = Mask::empty_like(m);
    for i in best {
        out.data[i] = 1;
    }
    out
}

fn offsets(radius: isize) -> Vec<[isize; 3]> {
    let r = -radius..=radius;
    let mut out = Vec::new();
    for dz in r.clone() {
        for dy in r.clone() {
            for dx in r.clone() {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// `{p ∈ volume : p − o ∈ m for some offset o in the cube}`.
pub fn set_dilate(m: &Mask, size: usize) -> Mask {
    let d = m.dims;
    let offs = offsets(size as isize / 2);
    let mut out = Mask::empty_like(m);
    for i in 0..d.len() {
        let c = coords(d, i);
        out.data[i] = u8::from(offs.iter().any(|o| {
            let q = [c[0] - o[0], c[1] - o[1], c[2] - o[2]];
            inside(d, q) && m.data[at(d, q)] == 1
        }));
    }
    out
}

/// `{p : p + o ∈ m for every offset o}`, outside the volume counting as background.
pub fn set_erode(m: &Mask, size: usize) -> Mask {
    let d = m.dims;
    let offs = offsets(size as isize / 2);
    let mut out = Mask::empty_like(m);
    for i in 0..d.len() {
        let c = coords(d, i);
        out.data[i] = u8::from(offs.iter().all(|o| {
            let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            inside(d, q) && m.data[at(d, q)] == 1
        }));
    }
    out
}

pub fn set_close(m: &Mask, size: usize) -> Mask {
    set_erode(&set_dilate(m, size), size)
}
