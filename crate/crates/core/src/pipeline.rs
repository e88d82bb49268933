//! Full cascade inference: liver slices, component cleanup, lesion crops
//! inside the liver box, and liver-masked lesion output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::io::{load_any, write_mask};
use crate::networks::NetworkGraph;
use crate::orient::reorient_to_canonical;
use crate::postprocess::{
    cascade_mask, close, dilate, largest_connected_component, stitch_slices, Connectivity, SlicePatch,
    StructuringElement,
};
use crate::preprocess::{clip_hu, crop_plane, expanded_liver_box, standardize, CropConfig, DatasetStats};
use crate::tensor::{Shape, Tensor};
use crate::train::{load_checkpoint, predict_batch, ModelContext};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessConfig {
    #[serde(default = "d_threshold")]
    pub threshold: f32,
    /// Cube edge for dilating the liver mask.
    #[serde(default)]
    pub dilate: Option<usize>,
    /// Cube edge for closing the liver mask.
    #[serde(default)]
    pub close: Option<usize>,
    #[serde(default = "d_conn")]
    pub connectivity: usize,
}

fn d_threshold() -> f32 {
    0.5
}
fn d_conn() -> usize {
    26
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { threshold: 0.5, dilate: None, close: None, connectivity: 26 }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        Connectivity::from_count(self.connectivity)?;
        for s in [self.dilate, self.close].into_iter().flatten() {
            StructuringElement::cube(s)?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// A trained stage ready for inference.
pub struct StageModel {
    pub network: NetworkGraph<f32>,
    pub context: ModelContext,
}

impl StageModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let c = load_checkpoint(dir)?;
        Ok(StageModel { network: c.network, context: c.manifest.context })
    }

    fn stats(&self) -> Result<DatasetStats> {
        self.context
            .stats
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint carries no intensity statistics".into()))
    }

    /// Clipped and standardized copy of `v` plus the padding value.
    fn prepare(&self, v: &Volume) -> Result<(Volume, f32)> {
        let stats = self.stats()?;
        let clip = self.context.clip;
        let z = standardize(&clip_hu(v, clip.lo, clip.hi)?, &stats);
        Ok((z, stats.apply(clip.lo)))
    }

    fn divisor(&self) -> usize {
        1 << self.network.config().pool_levels()
    }
}

pub struct Prediction {
    pub liver_prob: Volume,
    pub lesion_prob: Volume,
    pub liver: Mask,
    pub lesion: Mask,
    pub seconds: f64,
}

const CHUNK: usize = 8;

/// Liver probabilities from full slices along the model's axis.
pub fn liver_probabilities(model: &StageModel, v: &Volume) -> Result<Volume> {
    let (z, pad) = model.prepare(v)?;
    let axis = model.context.axis;
    let mut fit = model.context.fit;
    fit.multiple = fit.multiple.max(model.divisor());
    let (count, rows, cols) = axis.slice_shape(v.dims);
    let (fr, fc) = fit.fitted(rows, cols);
    let mut patches = Vec::with_capacity(count);
    for start in (0..count).step_by(CHUNK) {
        let ks: Vec<usize> = (start..(start + CHUNK).min(count)).collect();
        let mut values = Vec::with_capacity(ks.len() * fr * fc);
        for &k in &ks {
            values.extend(fit.fit_image(&z.slice(axis, k), rows, cols, pad));
        }
        let x = Tensor::from_vec(Shape::new(ks.len(), 1, fr, fc), values)?;
        let y = model.network.infer(&x)?;
        for (j, &k) in ks.iter().enumerate() {
            let plane = &y.values[j * fr * fc..(j + 1) * fr * fc];
            patches.push(SlicePatch { slice: k, origin: (0, 0), rows, cols, values: fit.unfit(plane, rows, cols) });
        }
    }
    let mut out = stitch_slices(&patches, axis, v.dims, v.spacing)?;
    out.affine = v.affine;
    Ok(out)
}

/// Window origins covering `[lo, hi]` with half-window overlap.
fn tile_origins(lo: usize, hi: usize, size: usize) -> Vec<isize> {
    let extent = hi - lo + 1;
    if extent <= size {
        return vec![lo as isize - ((size - extent) / 2) as isize];
    }
    let step = (size / 2).max(1);
    let last = (hi + 1 - size) as isize;
    let mut out: Vec<isize> = (lo as isize..last).step_by(step).collect();
    out.push(last);
    out
}

/// Lesion probabilities from tiled crops over the expanded liver box; zero elsewhere.
pub fn lesion_probabilities(model: &StageModel, v: &Volume, liver: &Mask) -> Result<Volume> {
    let axis = model.context.axis;
    let crop = model.context.crop.unwrap_or(CropConfig::default());
    let div = model.divisor();
    if crop.h % div != 0 || crop.w % div != 0 {
        return Err(Error::CheckpointMismatch(format!(
            "crop {}×{} is not a multiple of {div}",
            crop.h, crop.w
        )));
    }
    if liver.is_empty() {
        let mut out = Volume::filled(v.dims, 0.0, v.spacing);
        out.affine = v.affine;
        return Ok(out);
    }
    let (z, pad) = model.prepare(v)?;
    let (lo, hi) = expanded_liver_box(liver, crop.margin)?;
    let (_, rows, cols) = axis.slice_shape(v.dims);
    let (ra, ca) = axis.plane();
    let n = axis.normal();
    let row_tiles = tile_origins(lo[ra], hi[ra], crop.h);
    let col_tiles = tile_origins(lo[ca], hi[ca], crop.w);

    let mut jobs = Vec::new();
    for k in lo[n]..=hi[n] {
        for &r in &row_tiles {
            for &c in &col_tiles {
                jobs.push((k, (r, c)));
            }
        }
    }
    let mut patches = Vec::with_capacity(jobs.len());
    let mut current: Option<(usize, Vec<f32>)> = None;
    for chunk in jobs.chunks(CHUNK) {
        let mut values = Vec::with_capacity(chunk.len() * crop.h * crop.w);
        for &(k, origin) in chunk {
            if current.as_ref().is_none_or(|(ck, _)| *ck != k) {
                current = Some((k, z.slice(axis, k)));
            }
            let plane = &current.as_ref().unwrap().1;
            values.extend(crop_plane(plane, rows, cols, origin, crop.h, crop.w, pad));
        }
        let x = Tensor::from_vec(Shape::new(chunk.len(), 1, crop.h, crop.w), values)?;
        let y = predict_batch(&model.network, &x, CHUNK)?;
        for (j, &(k, origin)) in chunk.iter().enumerate() {
            patches.push(SlicePatch {
                slice: k,
                origin,
                rows: crop.h,
                cols: crop.w,
                values: y.sample(j).to_vec(),
            });
        }
    }
    let mut out = stitch_slices(&patches, axis, v.dims, v.spacing)?;
    out.affine = v.affine;
    Ok(out)
}

/// Runs the cascade on a volume already in canonical orientation.
pub fn predict_volume(liver_model: &StageModel, lesion_model: &StageModel, v: &Volume, post: &PostprocessConfig) -> Result<Prediction> {
    post.validate()?;
    let started = Instant::now();
    let conn = Connectivity::from_count(post.connectivity)?;
    let liver_prob = liver_probabilities(liver_model, v).stage("liver inference")?;
    let mut liver = largest_connected_component(&Mask::from_volume(&liver_prob, post.threshold), conn);
    if let Some(s) = post.dilate {
        liver = dilate(&liver, &StructuringElement::cube(s)?);
    }
    if let Some(s) = post.close {
        liver = close(&liver, &StructuringElement::cube(s)?);
    }
    let lesion_prob = lesion_probabilities(lesion_model, v, &liver).stage("lesion inference")?;
    let lesion = cascade_mask(&lesion_prob, &liver, post.threshold).stage("cascade")?;
    Ok(Prediction { liver_prob, lesion_prob, liver, lesion, seconds: started.elapsed().as_secs_f64() })
}

/// File stem shared by the written masks.
pub fn case_stem(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = name.strip_suffix(".nii").or_else(|| name.strip_suffix(".vol")).unwrap_or(&name);
    name.strip_suffix("_image").unwrap_or(name).to_string()
}

pub struct PredictFiles {
    pub liver: PathBuf,
    pub lesion: PathBuf,
    pub prediction: Prediction,
}

/// Runs the cascade on one volume file and writes `<stem>_liver.vol` and
/// `<stem>_lesion.vol` into `out_dir`.
pub fn predict_file(
    liver_model: &StageModel,
    lesion_model: &StageModel,
    volume_path: &Path,
    out_dir: &Path,
    post: &PostprocessConfig,
) -> Result<PredictFiles> {
    let v = load_any(volume_path).stage("read volume")?;
    let v = reorient_to_canonical(&v).stage("reorient")?;
    let prediction = predict_volume(liver_model, lesion_model, &v, post)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e)).stage("write masks")?;
    let stem = case_stem(volume_path);
    let liver = out_dir.join(format!("{stem}_liver.vol"));
    let lesion = out_dir.join(format!("{stem}_lesion.vol"));
    write_mask(&prediction.liver, &liver).stage("write masks")?;
    write_mask(&prediction.lesion, &lesion).stage("write masks")?;
    Ok(PredictFiles { liver, lesion, prediction })
}

/// Loads both checkpoints, then [`predict_file`].
pub fn run_predict(
    liver_checkpoint: &Path,
    lesion_checkpoint: &Path,
    volume_path: &Path,
    out_dir: &Path,
    post: &PostprocessConfig,
) -> Result<PredictFiles> {
    let liver_model = StageModel::load(liver_checkpoint).stage("load liver checkpoint")?;
    let lesion_model = StageModel::load(lesion_checkpoint).stage("load lesion checkpoint")?;
    predict_file(&liver_model, &lesion_model, volume_path, out_dir, post)
}
