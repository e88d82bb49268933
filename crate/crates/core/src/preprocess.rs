//! Hounsfield clipping, standardization and slice/crop extraction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::volume::{Axis, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for ClipRange {
    fn default() -> Self {
        ClipRange { lo: -100.0, hi: 400.0 }
    }
}

pub fn clip_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    let mut out = v.clone();
    out.data.iter_mut().for_each(|w| *w = w.clamp(lo, hi));
    Ok(out)
}

/// Pooled intensity statistics of the (clipped) training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
}

impl DatasetStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(mean.is_finite() && std.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite stats mean={mean} std={std}")));
        }
        if std <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        Ok(DatasetStats { mean, std })
    }

    pub fn apply(&self, hu: f32) -> f32 {
        ((hu as f64 - self.mean) / self.std) as f32
    }

    pub fn invert(&self, z: f32) -> f32 {
        (z as f64 * self.std + self.mean) as f32
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: DatasetStats = serde_json::from_str(&text)?;
        DatasetStats::new(s.mean, s.std)
    }
}

/// Mean and population standard deviation over every voxel of every volume.
pub fn compute_stats(volumes: &[Volume]) -> Result<DatasetStats> {
    let n: usize = volumes.iter().map(|v| v.data.len()).sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let voxels = || volumes.iter().flat_map(|v| v.data.iter().map(|w| *w as f64));
    let mean = voxels().sum::<f64>() / n as f64;
    let var = voxels().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    DatasetStats::new(mean, var.sqrt())
}

pub fn standardize(v: &Volume, s: &DatasetStats) -> Volume {
    let mut out = v.clone();
    out.data.iter_mut().for_each(|w| *w = s.apply(*w));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    #[serde(default = "d_crop")]
    pub h: usize,
    #[serde(default = "d_crop")]
    pub w: usize,
    /// Voxels added on each side of the liver bounding box.
    #[serde(default = "d_margin")]
    pub margin: usize,
}

fn d_crop() -> usize {
    224
}
fn d_margin() -> usize {
    16
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { h: 224, w: 224, margin: 16 }
    }
}

/// Where a training sample came from. `origin` is the crop's top-left pixel in
/// slice coordinates and may be negative when the crop hangs over the border.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub axis: Axis,
    pub slice: usize,
    pub origin: (isize, isize),
}

/// Images `(N,1,H,W)` and binary targets of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub provenance: Vec<Provenance>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.images.shape.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks batches with equal spatial shape.
    pub fn concat(batches: Vec<SliceBatch>) -> Result<SliceBatch> {
        let Some(first) = batches.first() else {
            return Err(Error::EmptyDataset);
        };
        let (h, w) = (first.images.shape.h, first.images.shape.w);
        let mut images = Vec::new();
        let mut targets = Vec::new();
        let mut provenance = Vec::new();
        for b in batches {
            if (b.images.shape.h, b.images.shape.w) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {}×{} slices with {}×{}",
                    b.images.shape.h, b.images.shape.w, h, w
                )));
            }
            images.extend(b.images.values);
            targets.extend(b.targets.values);
            provenance.extend(b.provenance);
        }
        let shape = Shape::new(provenance.len(), 1, h, w);
        Ok(SliceBatch {
            images: Tensor::from_vec(shape, images)?,
            targets: Tensor::from_vec(shape, targets)?,
            provenance,
        })
    }

    /// Sample `i` as a `(1,1,H,W)` image/target pair.
    pub fn get(&self, i: usize) -> (Vec<f32>, Vec<f32>) {
        (self.images.sample(i).to_vec(), self.targets.sample(i).to_vec())
    }
}

fn check_shapes(v: &Volume, masks: &[&Mask]) -> Result<()> {
    for m in masks {
        if m.dims != v.dims {
            return Err(Error::ShapeMismatch(format!("volume {:?} vs mask {:?}", v.dims.0, m.dims.0)));
        }
    }
    Ok(())
}

/// Copies an `h × w` window at `origin` out of a row-major slice, filling
/// pixels outside the slice with `pad`.
pub fn crop_plane<T: Copy>(plane: &[T], rows: usize, cols: usize, origin: (isize, isize), h: usize, w: usize, pad: T) -> Vec<T> {
    let mut out = vec![pad; h * w];
    for r in 0..h {
        let sr = origin.0 + r as isize;
        if sr < 0 || sr >= rows as isize {
            continue;
        }
        for c in 0..w {
            let sc = origin.1 + c as isize;
            if sc >= 0 && sc < cols as isize {
                out[r * w + c] = plane[sr as usize * cols + sc as usize];
            }
        }
    }
    out
}

/// Inclusive range of origins along one slice dimension of extent `len` for a
/// window of size `size` that must overlap `[lo, hi]`.
fn origin_range(lo: usize, hi: usize, len: usize, size: usize) -> (isize, isize) {
    if size >= len {
        let o = -(((size - len) / 2) as isize);
        return (o, o);
    }
    let first = (lo as isize - size as isize + 1).max(0);
    let last = (hi as isize).min((len - size) as isize);
    (first, last)
}

/// Liver bounding box expanded by `margin` per side and clamped to the volume.
pub fn expanded_liver_box(liver: &Mask, margin: usize) -> Result<([usize; 3], [usize; 3])> {
    let (lo, hi) = liver.bounding_box().ok_or(Error::EmptyLiver)?;
    let mut elo = [0; 3];
    let mut ehi = [0; 3];
    for a in 0..3 {
        elo[a] = lo[a].saturating_sub(margin);
        ehi[a] = (hi[a] + margin).min(liver.dims.0[a] - 1);
    }
    Ok((elo, ehi))
}

/// One seeded random crop per slice of the margin-expanded liver box.
///
/// `v` must already be standardized; `pad` is the value used outside the
/// volume, normally the standardized clip floor.
#[allow(clippy::too_many_arguments)]
pub fn extract_training_crops(
    v: &Volume,
    liver: &Mask,
    target: &Mask,
    axis: Axis,
    crop: &CropConfig,
    pad: f32,
    volume_id: &str,
    seed: u64,
) -> Result<SliceBatch> {
    check_shapes(v, &[liver, target])?;
    if crop.h == 0 || crop.w == 0 {
        return Err(Error::InvalidConfig("crop size must be positive".into()));
    }
    let (lo, hi) = expanded_liver_box(liver, crop.margin)?;
    let (_, rows, cols) = axis.slice_shape(v.dims);
    let (ra, ca) = axis.plane();
    let n = axis.normal();
    let row_range = origin_range(lo[ra], hi[ra], rows, crop.h);
    let col_range = origin_range(lo[ca], hi[ca], cols, crop.w);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = hi[n] - lo[n] + 1;
    let shape = Shape::new(count, 1, crop.h, crop.w);
    let mut images = Vec::with_capacity(shape.len());
    let mut targets = Vec::with_capacity(shape.len());
    let mut provenance = Vec::with_capacity(count);
    for k in lo[n]..=hi[n] {
        let origin = (
            rng.random_range(row_range.0 as i64..=row_range.1 as i64) as isize,
            rng.random_range(col_range.0 as i64..=col_range.1 as i64) as isize,
        );
        images.extend(crop_plane(&v.slice(axis, k), rows, cols, origin, crop.h, crop.w, pad));
        let t = target.slice(axis, k);
        targets.extend(crop_plane(&t, rows, cols, origin, crop.h, crop.w, 0u8).into_iter().map(f32::from));
        provenance.push(Provenance { volume_id: volume_id.to_string(), axis, slice: k, origin });
    }
    Ok(SliceBatch {
        images: Tensor::from_vec(shape, images)?,
        targets: Tensor::from_vec(shape, targets)?,
        provenance,
    })
}

/// Bilinear resampling of a row-major plane with aligned pixel centres.
pub fn resize_bilinear(plane: &[f32], rows: usize, cols: usize, nr: usize, nc: usize) -> Vec<f32> {
    if (rows, cols) == (nr, nc) {
        return plane.to_vec();
    }
    let sy = rows as f64 / nr as f64;
    let sx = cols as f64 / nc as f64;
    let mut out = Vec::with_capacity(nr * nc);
    for r in 0..nr {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = y - y0 as f64;
        for c in 0..nc {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = x - x0 as f64;
            let at = |yy: usize, xx: usize| plane[yy * cols + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Nearest-neighbour resampling.
pub fn resize_nearest<T: Copy>(plane: &[T], rows: usize, cols: usize, nr: usize, nc: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(nr * nc);
    for r in 0..nr {
        let sr = ((r * rows) / nr).min(rows - 1);
        for c in 0..nc {
            let sc = ((c * cols) / nc).min(cols - 1);
            out.push(plane[sr * cols + sc]);
        }
    }
    out
}

/// How full slices are fitted to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceFit {
    /// Resample each slice to `(rows, cols)` first.
    #[serde(default)]
    pub resize: Option<(usize, usize)>,
    /// Pad bottom/right up to this multiple.
    #[serde(default = "d_multiple")]
    pub multiple: usize,
}

fn d_multiple() -> usize {
    1
}

impl SliceFit {
    pub fn new(resize: Option<(usize, usize)>, multiple: usize) -> Self {
        SliceFit { resize, multiple: multiple.max(1) }
    }

    /// Network-side `(rows, cols)` for a native slice of `(rows, cols)`.
    pub fn fitted(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (r, c) = self.resize.unwrap_or((rows, cols));
        let m = self.multiple.max(1);
        (r.div_ceil(m) * m, c.div_ceil(m) * m)
    }

    pub fn fit_image(&self, plane: &[f32], rows: usize, cols: usize, pad: f32) -> Vec<f32> {
        let (r, c) = self.resize.unwrap_or((rows, cols));
        let resized = resize_bilinear(plane, rows, cols, r, c);
        let (fr, fc) = self.fitted(rows, cols);
        crop_plane(&resized, r, c, (0, 0), fr, fc, pad)
    }

    pub fn fit_target(&self, plane: &[u8], rows: usize, cols: usize) -> Vec<f32> {
        let (r, c) = self.resize.unwrap_or((rows, cols));
        let resized = resize_nearest(plane, rows, cols, r, c);
        let (fr, fc) = self.fitted(rows, cols);
        crop_plane(&resized, r, c, (0, 0), fr, fc, 0).into_iter().map(f32::from).collect()
    }

    /// Maps a network output back to the native slice grid.
    pub fn unfit(&self, plane: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let (r, c) = self.resize.unwrap_or((rows, cols));
        let (fr, fc) = self.fitted(rows, cols);
        let cropped = crop_plane(plane, fr, fc, (0, 0), r, c, 0.0);
        resize_bilinear(&cropped, r, c, rows, cols)
    }
}

/// Every slice along `axis` (or only `slices`), fitted per `fit`.
pub fn extract_full_slices(
    v: &Volume,
    target: &Mask,
    axis: Axis,
    fit: &SliceFit,
    pad: f32,
    volume_id: &str,
    slices: Option<std::ops::RangeInclusive<usize>>,
) -> Result<SliceBatch> {
    check_shapes(v, &[target])?;
    let (count, rows, cols) = axis.slice_shape(v.dims);
    let range = slices.unwrap_or(0..=count.saturating_sub(1));
    let (fr, fc) = fit.fitted(rows, cols);
    let mut images = Vec::new();
    let mut targets = Vec::new();
    let mut provenance = Vec::new();
    for k in range.filter(|k| *k < count) {
        images.extend(fit.fit_image(&v.slice(axis, k), rows, cols, pad));
        targets.extend(fit.fit_target(&target.slice(axis, k), rows, cols));
        provenance.push(Provenance { volume_id: volume_id.to_string(), axis, slice: k, origin: (0, 0) });
    }
    let shape = Shape::new(provenance.len(), 1, fr, fc);
    Ok(SliceBatch {
        images: Tensor::from_vec(shape, images)?,
        targets: Tensor::from_vec(shape, targets)?,
        provenance,
    })
}
