//! Synthetic CT phantoms: body cylinder, ellipsoidal liver, spherical lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::mix_seed;
use crate::volume::{spacing_affine, Dims, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axes (x, y) of the body's elliptic cross-section, centred in-plane
    /// and running the full z extent.
    pub body_radii: [f64; 2],
    pub liver: Ellipsoid,
    pub lesions: Vec<Sphere>,
    pub noise_sigma: f64,
    pub hu_background: f32,
    pub hu_body: f32,
    pub hu_liver: f32,
    pub hu_lesion: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Centred liver and body with default intensities and no lesions.
    pub fn new(size: [usize; 3]) -> Self {
        let s = size.map(|v| v as f64);
        PhantomSpec {
            size,
            spacing: [1.0; 3],
            body_radii: [0.46 * s[0], 0.40 * s[1]],
            liver: Ellipsoid {
                center: [s[0] / 2.0 - 0.5, s[1] / 2.0 - 0.5, s[2] / 2.0 - 0.5],
                radii: [0.25 * s[0], 0.2 * s[1], 0.3 * s[2]],
            },
            lesions: Vec::new(),
            noise_sigma: 0.0,
            hu_background: -1000.0,
            hu_body: 40.0,
            hu_liver: 100.0,
            hu_lesion: 20.0,
            seed: 0,
        }
    }

    fn body_contains(&self, p: [f64; 3]) -> bool {
        let c = [self.size[0] as f64 / 2.0 - 0.5, self.size[1] as f64 / 2.0 - 0.5];
        ((p[0] - c[0]) / self.body_radii[0]).powi(2) + ((p[1] - c[1]) / self.body_radii[1]).powi(2) <= 1.0
    }
}

/// One generated case.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub liver: Mask,
    pub lesion: Mask,
}

fn lesion_voxels_inside(dims: Dims, liver: &Ellipsoid, s: &Sphere) -> bool {
    let lo = s.center.map(|c| (c - s.radius).floor().max(0.0) as usize);
    let hi = [0, 1, 2].map(|a| ((s.center[a] + s.radius).ceil() as usize).min(dims.0[a].saturating_sub(1)));
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x as f64, y as f64, z as f64];
                if s.contains(p) && !liver.contains(p) {
                    return false;
                }
            }
        }
    }
    true
}

/// Layered constants plus Gaussian noise, with exact membership masks.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, Mask, Mask)> {
    let dims = Dims(spec.size);
    if dims.is_empty() {
        return Err(Error::InvalidConfig("phantom size must be positive".into()));
    }
    if spec.liver.radii.iter().any(|r| !(*r >= 1.0)) || spec.lesions.iter().any(|l| !(l.radius >= 1.0)) {
        return Err(Error::InvalidConfig("phantom radii must be >= 1".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {} must be >= 0", spec.noise_sigma)));
    }
    for (i, l) in spec.lesions.iter().enumerate() {
        if !lesion_voxels_inside(dims, &spec.liver, l) {
            return Err(Error::LesionOutsideLiver(i));
        }
    }
    let n = dims.len();
    let mut data = vec![spec.hu_background; n];
    let mut liver = vec![0u8; n];
    let mut lesion = vec![0u8; n];
    for i in 0..n {
        let c = dims.coords(i);
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        if spec.body_contains(p) {
            data[i] = spec.hu_body;
        }
        if spec.liver.contains(p) {
            data[i] = spec.hu_liver;
            liver[i] = 1;
            if spec.lesions.iter().any(|s| s.contains(p)) {
                data[i] = spec.hu_lesion;
                lesion[i] = 1;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        data.iter_mut().for_each(|v| *v = (*v as f64 + noise.sample(&mut rng)) as f32);
    }
    let affine = spacing_affine(spec.spacing);
    Ok((
        Volume::new(dims, data, spec.spacing, affine)?,
        Mask::with_affine(dims, liver, spec.spacing, affine)?,
        Mask::with_affine(dims, lesion, spec.spacing, affine)?,
    ))
}

pub const DEFAULT_NOISE_SIGMA: f64 = 15.0;

/// Samples a liver pose and up to `max_lesions` lesions for case `index`.
fn random_spec(size: [usize; 3], index: usize, seed: u64, force_lesion: bool) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let s = size.map(|v| v as f64);
    let mut spec = PhantomSpec::new(size);
    spec.seed = rng.random();
    spec.noise_sigma = DEFAULT_NOISE_SIGMA;
    let radii = [
        rng.random_range(0.20..0.28) * s[0],
        rng.random_range(0.16..0.22) * s[1],
        rng.random_range(0.24..0.34) * s[2],
    ];
    let center = [
        s[0] / 2.0 + rng.random_range(-0.08..0.08) * s[0],
        s[1] / 2.0 + rng.random_range(-0.06..0.06) * s[1],
        s[2] / 2.0 + rng.random_range(-0.08..0.08) * s[2],
    ];
    spec.liver = Ellipsoid { center, radii: radii.map(|r| r.max(1.0)) };

    let count = if force_lesion { rng.random_range(1..=3) } else { rng.random_range(0..=3) };
    let min_side = s.iter().copied().fold(f64::INFINITY, f64::min);
    let dims = Dims(size);
    let mut attempts = 0;
    while spec.lesions.len() < count && attempts < 200 {
        attempts += 1;
        let radius = (rng.random_range(0.05..0.09) * min_side).max(1.0);
        let shrunk = spec.liver.radii.map(|r| r - radius - 1.0);
        if shrunk.iter().any(|r| *r <= 0.0) {
            continue;
        }
        // uniform direction and radius fraction inside the shrunk ellipsoid
        let u: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        let c = [0, 1, 2].map(|a| spec.liver.center[a] + u[a] * shrunk[a]);
        let sphere = Sphere { center: c, radius };
        if lesion_voxels_inside(dims, &spec.liver, &sphere) {
            spec.lesions.push(sphere);
        }
    }
    spec
}

/// Case `index` of the seeded series; every third case has at least one lesion.
pub fn generate_case(index: usize, size: [usize; 3], seed: u64) -> Result<Phantom> {
    let spec = random_spec(size, index, seed, index % 3 == 0);
    let (volume, liver, lesion) = generate(&spec)?;
    Ok(Phantom { id: format!("case_{index:03}"), spec, volume, liver, lesion })
}

/// Cases `0..n` of [`generate_case`].
pub fn generate_dataset(n: usize, size: [usize; 3], seed: u64) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    (0..n).map(|i| generate_case(i, size, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_phantom_uses_layered_constants() {
        let mut spec = PhantomSpec::new([24, 24, 16]);
        spec.lesions.push(Sphere { center: [11.5, 11.5, 7.5], radius: 2.0 });
        let (v, liver, lesion) = generate(&spec).unwrap();
        let allowed = [-1000.0, 40.0, 100.0, 20.0];
        assert!(v.data.iter().all(|w| allowed.contains(w)));
        assert!(lesion.is_subset_of(&liver));
        assert!(!lesion.is_empty());
        for i in 0..v.data.len() {
            if lesion.data[i] == 1 {
                assert_eq!(v.data[i], 20.0);
            } else if liver.data[i] == 1 {
                assert_eq!(v.data[i], 100.0);
            }
        }
    }

    #[test]
    fn liver_volume_matches_membership_count() {
        let spec = PhantomSpec::new([20, 18, 12]);
        let (_, liver, lesion) = generate(&spec).unwrap();
        assert!(lesion.is_empty());
        let e = spec.liver;
        let mut count = 0;
        for z in 0..12 {
            for y in 0..18 {
                for x in 0..20 {
                    let d = ((x as f64 - e.center[0]) / e.radii[0]).powi(2)
                        + ((y as f64 - e.center[1]) / e.radii[1]).powi(2)
                        + ((z as f64 - e.center[2]) / e.radii[2]).powi(2);
                    if d <= 1.0 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(liver.count(), count);
    }

    #[test]
    fn lesion_outside_liver_is_rejected() {
        let mut spec = PhantomSpec::new([24, 24, 16]);
        spec.lesions.push(Sphere { center: [1.0, 1.0, 1.0], radius: 2.0 });
        assert!(matches!(generate(&spec), Err(Error::LesionOutsideLiver(0))));
    }

    #[test]
    fn seeded_dataset_is_reproducible() {
        let a = generate_dataset(6, [24, 24, 20], 5).unwrap();
        let b = generate_dataset(6, [24, 24, 20], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.lesion.is_subset_of(&p.liver)));
        let with = a.iter().filter(|p| !p.lesion.is_empty()).count();
        assert!(with * 10 >= 3 * a.len());
    }
}
