//! 3D scalar volumes and binary masks.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + X * (y + Y * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Builds `diag(spacing, 1)`.
pub fn spacing_affine(spacing: [f64; 3]) -> Affine {
    let mut a = IDENTITY_AFFINE;
    for (i, s) in spacing.iter().enumerate() {
        a[i][i] = *s;
    }
    a
}

/// Grid extent `(X, Y, Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Dims([x, y, z])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.0[0];
        let yz = idx / self.0[0];
        [x, yz % self.0[1], yz / self.0[1]]
    }
}

/// Slicing direction. Axial fixes z, coronal fixes y, sagittal fixes x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Axis::Axial),
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            other => Err(Error::InvalidConfig(format!("unknown axis {other:?}, expected axial, coronal or sagittal"))),
        }
    }
}

impl Axis {
    /// Volume axis held fixed by a slice.
    pub fn normal(self) -> usize {
        match self {
            Axis::Axial => 2,
            Axis::Coronal => 1,
            Axis::Sagittal => 0,
        }
    }

    /// Volume axes mapped to the slice's (row, column).
    pub fn plane(self) -> (usize, usize) {
        match self {
            Axis::Axial => (1, 0),
            Axis::Coronal => (2, 0),
            Axis::Sagittal => (2, 1),
        }
    }

    /// Number of slices and the (rows, cols) of each.
    pub fn slice_shape(self, dims: Dims) -> (usize, usize, usize) {
        let (r, c) = self.plane();
        (dims.0[self.normal()], dims.0[r], dims.0[c])
    }

    /// Linear voxel index of pixel `(row, col)` in slice `k`.
    #[inline]
    pub fn voxel(self, dims: Dims, k: usize, row: usize, col: usize) -> usize {
        let mut p = [0usize; 3];
        let (r, c) = self.plane();
        p[self.normal()] = k;
        p[r] = row;
        p[c] = col;
        dims.index(p[0], p[1], p[2])
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

fn check_affine(affine: &Affine) -> Result<()> {
    if affine[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::HeaderParse(format!(
            "affine bottom row must be (0,0,0,1), got {:?}",
            affine[3]
        )));
    }
    Ok(())
}

/// A CT scan or probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>, spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume {:?} needs {} voxels, got {}",
                dims.0,
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite voxel at index {i}")));
        }
        check_spacing(spacing)?;
        check_affine(&affine)?;
        Ok(Volume {
            dims,
            data,
            spacing,
            affine,
        })
    }

    /// Unit-spaced volume with an identity-scaled affine.
    pub fn from_data(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Volume::new(dims, data, [1.0; 3], IDENTITY_AFFINE)
    }

    pub fn filled(dims: Dims, value: f32, spacing: [f64; 3]) -> Self {
        Volume {
            dims,
            data: vec![value; dims.len()],
            spacing,
            affine: spacing_affine(spacing),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Copies slice `k` along `axis` into a row-major image.
    pub fn slice(&self, axis: Axis, k: usize) -> Vec<f32> {
        let (_, h, w) = axis.slice_shape(self.dims);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.data[axis.voxel(self.dims, k, r, c)]);
            }
        }
        out
    }
}

/// Binary segmentation with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<u8>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        Mask::with_affine(dims, data, spacing, spacing_affine(spacing))
    }

    pub fn with_affine(dims: Dims, data: Vec<u8>, spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} needs {} voxels, got {}",
                dims.0,
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| *v > 1) {
            return Err(Error::ShapeMismatch(format!(
                "mask value {} at index {i} is not 0/1",
                data[i]
            )));
        }
        check_spacing(spacing)?;
        check_affine(&affine)?;
        Ok(Mask {
            dims,
            data,
            spacing,
            affine,
        })
    }

    pub fn empty(dims: Dims, spacing: [f64; 3]) -> Self {
        Mask {
            dims,
            data: vec![0; dims.len()],
            spacing,
            affine: spacing_affine(spacing),
        }
    }

    /// Same grid as `other`, all background.
    pub fn empty_like(other: &Mask) -> Self {
        Mask {
            dims: other.dims,
            data: vec![0; other.dims.len()],
            spacing: other.spacing,
            affine: other.affine,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)] != 0
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| *a == 0 || *b != 0)
    }

    /// Inclusive per-axis bounds `[lo, hi]` of the foreground, or `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, v) in self.data.iter().enumerate() {
            if *v != 0 {
                any = true;
                let p = self.dims.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    pub fn slice(&self, axis: Axis, k: usize) -> Vec<u8> {
        let (_, h, w) = axis.slice_shape(self.dims);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.data[axis.voxel(self.dims, k, r, c)]);
            }
        }
        out
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|v| *v as f32).collect(),
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    /// Binarizes a volume: voxels `>= threshold` become foreground.
    pub fn from_volume(v: &Volume, threshold: f32) -> Mask {
        Mask {
            dims: v.dims,
            data: v.data.iter().map(|x| u8::from(*x >= threshold)).collect(),
            spacing: v.spacing,
            affine: v.affine,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_are_inverse() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn slices_cover_expected_planes() {
        let d = Dims::new(2, 3, 4);
        let v = Volume::from_data(d, (0..24).map(|i| i as f32).collect()).unwrap();
        // axial slice z=1: rows over y, cols over x
        assert_eq!(v.slice(Axis::Axial, 1), vec![6., 7., 8., 9., 10., 11.]);
        // coronal y=2: rows over z, cols over x
        assert_eq!(v.slice(Axis::Coronal, 2), vec![4., 5., 10., 11., 16., 17., 22., 23.]);
        assert_eq!(Axis::Sagittal.slice_shape(d), (2, 4, 3));
    }

    #[test]
    fn rejects_non_binary_and_bad_affine() {
        let d = Dims::new(1, 1, 2);
        assert!(Mask::new(d, vec![0, 2], [1.0; 3]).is_err());
        let mut a = IDENTITY_AFFINE;
        a[3][0] = 1.0;
        assert!(Volume::new(d, vec![0.0; 2], [1.0; 3], a).is_err());
        assert!(Volume::new(d, vec![0.0; 2], [0.0, 1.0, 1.0], IDENTITY_AFFINE).is_err());
    }

    #[test]
    fn bounding_box_of_two_voxels() {
        let d = Dims::new(4, 4, 4);
        let mut m = Mask::empty(d, [1.0; 3]);
        m.data[d.index(1, 2, 3)] = 1;
        m.data[d.index(3, 0, 1)] = 1;
        assert_eq!(m.bounding_box(), Some(([1, 0, 1], [3, 2, 3])));
        assert_eq!(Mask::empty(d, [1.0; 3]).bounding_box(), None);
    }
}
