//! Connected components, cube morphology, cascade masking and slice stitching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Axis, Dims, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidConfig(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }

    /// Neighbour offsets that precede a voxel in scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=0isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if before && (self == Connectivity::TwentySix || manhattan == 1) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Cube of odd edge length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    size: usize,
}

impl StructuringElement {
    pub fn cube(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidConfig(format!("structuring element size must be odd and >= 1, got {size}")));
        }
        Ok(StructuringElement { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Component label (root linear index) of every foreground voxel; background
/// voxels map to `usize::MAX`. Roots are each component's smallest index.
pub fn label_components(m: &Mask, conn: Connectivity) -> Vec<usize> {
    let d = m.dims;
    let [nx, ny, nz] = d.0;
    let mut parent: Vec<usize> = (0..d.len()).collect();
    let offsets = conn.backward_offsets();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = d.index(x, y, z);
                if m.data[i] == 0 {
                    continue;
                }
                for o in &offsets {
                    let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let j = d.index(qx as usize, qy as usize, qz as usize);
                    if m.data[j] != 0 {
                        union(&mut parent, i, j);
                    }
                }
            }
        }
    }
    (0..d.len())
        .map(|i| if m.data[i] == 0 { usize::MAX } else { find(&mut parent, i) })
        .collect()
}

/// Keeps the largest component; ties go to the component containing the
/// smallest linear voxel index.
pub fn largest_connected_component(m: &Mask, conn: Connectivity) -> Mask {
    let labels = label_components(m, conn);
    let mut sizes = vec![0usize; labels.len()];
    for &l in &labels {
        if l != usize::MAX {
            sizes[l] += 1;
        }
    }
    let mut out = Mask::empty_like(m);
    // roots are minimal indices, so scanning upward resolves ties
    let Some(best) = (0..sizes.len()).filter(|i| sizes[*i] > 0).max_by(|a, b| sizes[*a].cmp(&sizes[*b]).then(b.cmp(a)))
    else {
        return out;
    };
    for (o, l) in out.data.iter_mut().zip(&labels) {
        *o = u8::from(*l == best);
    }
    out
}

/// One separable pass of a running max (dilate) or min (erode) of width
/// `2r + 1` along `axis`; out-of-bounds reads as `outside`.
fn pass(data: &[u8], d: Dims, axis: usize, r: usize, dilate: bool, outside: u8) -> Vec<u8> {
    let mut out = vec![0u8; data.len()];
    let len = d.0[axis];
    let stride = match axis {
        0 => 1,
        1 => d.0[0],
        _ => d.0[0] * d.0[1],
    };
    let [nx, ny, nz] = d.0;
    let mut line = vec![0u8; len];
    for z in 0..if axis == 2 { 1 } else { nz } {
        for y in 0..if axis == 1 { 1 } else { ny } {
            for x in 0..if axis == 0 { 1 } else { nx } {
                let base = d.index(x, y, z);
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[base + k * stride];
                }
                // prefix counts of foreground make each window O(1)
                let mut prefix = vec![0usize; len + 1];
                for k in 0..len {
                    prefix[k + 1] = prefix[k] + line[k] as usize;
                }
                for k in 0..len {
                    let lo = k.saturating_sub(r);
                    let hi = (k + r).min(len - 1);
                    let ones = prefix[hi + 1] - prefix[lo];
                    let width = hi - lo + 1;
                    let clipped = k < r || k + r > len - 1;
                    let v = if dilate {
                        ones > 0 || (clipped && outside == 1)
                    } else {
                        ones == width && !(clipped && outside == 0)
                    };
                    out[base + k * stride] = u8::from(v);
                }
            }
        }
    }
    out
}

fn morph(m: &Mask, s: &StructuringElement, dilate: bool) -> Mask {
    let r = s.radius();
    let mut out = m.clone();
    if r == 0 {
        return out;
    }
    let mut data = m.data.clone();
    for axis in 0..3 {
        data = pass(&data, m.dims, axis, r, dilate, 0);
    }
    out.data = data;
    out
}

/// Union of the cube placed at every foreground voxel, clipped to the volume.
pub fn dilate(m: &Mask, s: &StructuringElement) -> Mask {
    morph(m, s, true)
}

/// Voxels whose whole cube neighbourhood is foreground; outside is background.
pub fn erode(m: &Mask, s: &StructuringElement) -> Mask {
    morph(m, s, false)
}

pub fn close(m: &Mask, s: &StructuringElement) -> Mask {
    erode(&dilate(m, s), s)
}

/// `1` where `lesion_prob ≥ threshold` inside the liver.
pub fn cascade_mask(lesion_prob: &Volume, liver: &Mask, threshold: f32) -> Result<Mask> {
    if lesion_prob.dims != liver.dims {
        return Err(Error::ShapeMismatch(format!(
            "lesion probabilities {:?} vs liver {:?}",
            lesion_prob.dims.0, liver.dims.0
        )));
    }
    let mut out = Mask::empty_like(liver);
    for ((o, p), l) in out.data.iter_mut().zip(&lesion_prob.data).zip(&liver.data) {
        *o = u8::from(*p >= threshold && *l == 1);
    }
    Ok(out)
}

/// A 2D probability map placed at `origin` (row, col) of slice `slice`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePatch {
    pub slice: usize,
    pub origin: (isize, isize),
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

/// Averages patches into a volume of extent `dims`; uncovered voxels stay 0.
/// Patch pixels outside the volume are dropped.
pub fn stitch_slices(patches: &[SlicePatch], axis: Axis, dims: Dims, spacing: [f64; 3]) -> Result<Volume> {
    let (count, rows, cols) = axis.slice_shape(dims);
    let mut sum = vec![0f64; dims.len()];
    let mut hits = vec![0u32; dims.len()];
    for p in patches {
        if p.slice >= count {
            return Err(Error::ExtentMismatch(format!("slice {} outside {count} slices", p.slice)));
        }
        if p.values.len() != p.rows * p.cols {
            return Err(Error::ExtentMismatch(format!(
                "patch holds {} values for {}×{}",
                p.values.len(),
                p.rows,
                p.cols
            )));
        }
        for r in 0..p.rows {
            let vr = p.origin.0 + r as isize;
            if vr < 0 || vr >= rows as isize {
                continue;
            }
            for c in 0..p.cols {
                let vc = p.origin.1 + c as isize;
                if vc < 0 || vc >= cols as isize {
                    continue;
                }
                let i = axis.voxel(dims, p.slice, vr as usize, vc as usize);
                sum[i] += p.values[r * p.cols + c] as f64;
                hits[i] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&hits)
        .map(|(s, h)| if *h == 0 { 0.0 } else { (s / *h as f64) as f32 })
        .collect();
    let mut v = Volume::from_data(dims, data)?;
    v.spacing = spacing;
    Ok(v)
}
