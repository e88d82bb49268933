//! Axis-aligned reorientation to a positive-diagonal (RAS-like) grid.

use crate::error::{Error, Result};
use crate::volume::{Affine, Dims, Volume};

/// Largest deviation of a normalized direction cosine from ±1 that still
/// counts as axis-aligned.
pub const COSINE_TOLERANCE: f64 = 0.2;

/// For each new axis `i`: the old voxel axis it reads and whether it is flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisMap {
    pub source: [usize; 3],
    pub flip: [bool; 3],
}

impl AxisMap {
    pub fn is_identity(&self) -> bool {
        self.source == [0, 1, 2] && self.flip == [false; 3]
    }
}

/// Decomposes the affine's linear part into a signed axis permutation.
pub fn axis_map(affine: &Affine) -> Result<AxisMap> {
    let mut source = [usize::MAX; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let col = [affine[0][j], affine[1][j], affine[2][j]];
        let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ObliqueAffine(format!("voxel axis {j} has zero length")));
        }
        let unit = col.map(|c| c / norm);
        if let Some(c) = unit.iter().find(|c| (*c - c.round()).abs() > COSINE_TOLERANCE) {
            return Err(Error::ObliqueAffine(format!(
                "voxel axis {j} has direction cosine {c:.3}, not within {COSINE_TOLERANCE} of an axis"
            )));
        }
        let (world, cos) = unit
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if source[world] != usize::MAX {
            return Err(Error::ObliqueAffine(format!(
                "voxel axes {} and {j} both map to world axis {world}",
                source[world]
            )));
        }
        source[world] = j;
        flip[world] = cos < 0.0;
    }
    Ok(AxisMap { source, flip })
}

/// Permutes and flips the voxel grid so the affine's upper-left 3×3 has a
/// positive dominant diagonal. World coordinates of every voxel are preserved.
pub fn reorient_to_canonical(v: &Volume) -> Result<Volume> {
    let map = axis_map(&v.affine)?;
    if map.is_identity() {
        return Ok(v.clone());
    }
    let (dims, lookup) = remap(v.dims, map);
    let data = lookup.iter().map(|&i| v.data[i]).collect();
    let spacing = [0, 1, 2].map(|i| v.spacing[map.source[i]]);

    // new voxel n maps to old voxel o = F n + f0
    let mut affine = v.affine;
    for r in 0..3 {
        let mut t = v.affine[r][3];
        for i in 0..3 {
            let j = map.source[i];
            let sign = if map.flip[i] { -1.0 } else { 1.0 };
            affine[r][i] = sign * v.affine[r][j];
            if map.flip[i] {
                t += v.affine[r][j] * (v.dims.0[j] as f64 - 1.0);
            }
        }
        affine[r][3] = t;
    }
    Volume::new(dims, data, spacing, affine)
}

/// New grid extent and, per new linear index, the old linear index.
pub fn remap(old: Dims, map: AxisMap) -> (Dims, Vec<usize>) {
    let dims = Dims([0, 1, 2].map(|i| old.0[map.source[i]]));
    let mut lookup = Vec::with_capacity(dims.len());
    for z in 0..dims.0[2] {
        for y in 0..dims.0[1] {
            for x in 0..dims.0[0] {
                let n = [x, y, z];
                let mut o = [0usize; 3];
                for i in 0..3 {
                    let j = map.source[i];
                    o[j] = if map.flip[i] { old.0[j] - 1 - n[i] } else { n[i] };
                }
                lookup.push(old.index(o[0], o[1], o[2]));
            }
        }
    }
    (dims, lookup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{spacing_affine, IDENTITY_AFFINE};

    fn ramp(d: Dims) -> Volume {
        Volume::from_data(d, (0..d.len()).map(|i| i as f32).collect()).unwrap()
    }

    fn world(a: &Affine, p: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|r| (0..3).map(|c| a[r][c] * p[c] as f64).sum::<f64>() + a[r][3])
    }

    #[test]
    fn identity_affine_is_unchanged() {
        let v = ramp(Dims::new(2, 3, 4));
        assert_eq!(reorient_to_canonical(&v).unwrap(), v);
    }

    #[test]
    fn negative_x_reverses_x() {
        let mut a = IDENTITY_AFFINE;
        a[0][0] = -1.0;
        let d = Dims::new(2, 2, 2);
        let v = Volume::new(d, ramp(d).data, [1.0; 3], a).unwrap();
        let r = reorient_to_canonical(&v).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(r.get(x, y, z), v.get(2 - 1 - x, y, z));
                }
            }
        }
        assert!(r.affine[0][0] > 0.0);
    }

    #[test]
    fn swapped_axes_transpose_data_and_spacing() {
        let mut a = [[0.0; 4]; 4];
        a[0][1] = 2.0; // voxel y -> world x
        a[1][0] = 0.5; // voxel x -> world y
        a[2][2] = 3.0;
        a[3][3] = 1.0;
        let d = Dims::new(3, 4, 2);
        let v = Volume::new(d, ramp(d).data, [0.5, 2.0, 3.0], a).unwrap();
        let r = reorient_to_canonical(&v).unwrap();
        assert_eq!(r.dims, Dims::new(4, 3, 2));
        assert_eq!(r.spacing, [2.0, 0.5, 3.0]);
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(r.get(x, y, z), v.get(y, x, z));
                }
            }
        }
    }

    #[test]
    fn world_positions_are_preserved() {
        let mut a = [[0.0; 4]; 4];
        a[0][2] = -1.5;
        a[1][0] = 2.0;
        a[2][1] = -0.7;
        a[0][3] = 12.0;
        a[1][3] = -4.0;
        a[2][3] = 3.0;
        a[3][3] = 1.0;
        let d = Dims::new(3, 4, 5);
        let v = Volume::new(d, ramp(d).data, [2.0, 0.7, 1.5], a).unwrap();
        let r = reorient_to_canonical(&v).unwrap();
        for i in 0..r.dims.len() {
            let p = r.dims.coords(i);
            let old = v.dims.coords(r.data[i] as usize);
            let (w1, w2) = (world(&r.affine, p), world(&v.affine, old));
            for k in 0..3 {
                assert!((w1[k] - w2[k]).abs() < 1e-9);
            }
        }
        assert_eq!(reorient_to_canonical(&r).unwrap(), r);
    }

    #[test]
    fn oblique_affine_is_rejected() {
        let t = 30f64.to_radians();
        let mut a = spacing_affine([1.0; 3]);
        a[0][0] = t.cos();
        a[0][1] = -t.sin();
        a[1][0] = t.sin();
        a[1][1] = t.cos();
        let v = Volume::new(Dims::new(1, 1, 1), vec![0.0], [1.0; 3], a).unwrap();
        assert!(matches!(reorient_to_canonical(&v), Err(Error::ObliqueAffine(_))));

        // 5 degrees is within tolerance
        let t = 5f64.to_radians();
        a[0][0] = t.cos();
        a[0][1] = -t.sin();
        a[1][0] = t.sin();
        a[1][1] = t.cos();
        let v = Volume::new(Dims::new(1, 1, 1), vec![0.0], [1.0; 3], a).unwrap();
        assert!(reorient_to_canonical(&v).is_ok());
    }
}
