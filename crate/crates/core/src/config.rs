//! Pipeline configuration file and per-stage dataset assembly and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::io::{load_any, read_mask, write_mask, write_volume};
use crate::orient::reorient_to_canonical;
use crate::phantom::Phantom;
use crate::pipeline::PostprocessConfig;
use crate::preprocess::{
    clip_hu, compute_stats, extract_full_slices, extract_training_crops, standardize, ClipRange, CropConfig,
    DatasetStats, SliceBatch, SliceFit,
};
use crate::train::{checkpoint_path, train, ModelContext, TrainConfig, TrainOutcome};
use crate::volume::{Axis, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    #[serde(default)]
    pub stats: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub axis: Axis,
    /// Random crops around the liver; full slices when absent.
    #[serde(default)]
    pub crop: Option<CropConfig>,
    #[serde(default)]
    pub fit: SliceFit,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Liver,
    Lesion,
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "liver" => Ok(StageKind::Liver),
            "lesion" => Ok(StageKind::Lesion),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}, expected liver or lesion"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub clip: ClipRange,
    /// Trailing fraction of cases (sorted by id) held out for validation.
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    pub liver: StageConfig,
    pub lesion: StageConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
}

fn d_val() -> f64 {
    0.2
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidConfig(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn stage(&self, kind: StageKind) -> &StageConfig {
        match kind {
            StageKind::Liver => &self.liver,
            StageKind::Lesion => &self.lesion,
        }
    }

    pub fn stage_mut(&mut self, kind: StageKind) -> &mut StageConfig {
        match kind {
            StageKind::Liver => &mut self.liver,
            StageKind::Lesion => &mut self.lesion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip.lo < self.clip.hi) {
            return Err(Error::InvalidRange { lo: self.clip.lo, hi: self.clip.hi });
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.postprocess.validate()?;
        for (name, s) in [("liver", &self.liver), ("lesion", &self.lesion)] {
            s.validate().map_err(|e| Error::InvalidConfig(format!("{name}: {e}")))?;
        }
        if self.lesion.crop.is_none() {
            return Err(Error::InvalidConfig("lesion: crop is required".into()));
        }
        Ok(())
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(c) = self.crop {
            let div = 1 << self.train.network.pool_levels();
            if c.h == 0 || c.w == 0 || c.h % div != 0 || c.w % div != 0 {
                return Err(Error::InvalidConfig(format!("crop {}×{} must be a positive multiple of {div}", c.h, c.w)));
            }
        }
        Ok(())
    }

    /// Slice fitting with padding to the network's pooling divisor.
    pub fn effective_fit(&self) -> SliceFit {
        let div = 1 << self.train.network.pool_levels();
        SliceFit::new(self.fit.resize, self.fit.multiple.max(div))
    }
}

/// A CT volume in canonical orientation with its reference masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub liver: Mask,
    pub lesion: Mask,
}

impl From<Phantom> for Case {
    fn from(p: Phantom) -> Self {
        Case { id: p.id, volume: p.volume, liver: p.liver, lesion: p.lesion }
    }
}

/// `m` resampled into canonical orientation.
pub fn canonical_mask(m: &Mask) -> Result<Mask> {
    let v = reorient_to_canonical(&m.to_volume())?;
    Ok(Mask::from_volume(&v, 0.5))
}

/// `(id, image path)` of every `<id>_image.{vol,nii}` in `dir`, sorted by id.
pub fn case_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for suffix in ["_image.vol", "_image.nii"] {
            if let Some(id) = name.strip_suffix(suffix) {
                images.push((id.to_string(), path.clone()));
            }
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(images)
}

/// Reads one case: the image plus `<id>_liver.vol` and `<id>_lesion.vol`
/// next to it, all reoriented to canonical.
pub fn load_case(dir: &Path, id: &str, image: &Path) -> Result<Case> {
    let volume = reorient_to_canonical(&load_any(image)?)?;
    let liver = canonical_mask(&read_mask(dir.join(format!("{id}_liver.vol")))?)?;
    let lesion = canonical_mask(&read_mask(dir.join(format!("{id}_lesion.vol")))?)?;
    if liver.dims != volume.dims || lesion.dims != volume.dims {
        return Err(Error::ShapeMismatch(format!("case {id}: masks do not match the image")));
    }
    Ok(Case { id: id.to_string(), volume, liver, lesion })
}

pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    case_images(dir)?.iter().map(|(id, path)| load_case(dir, id, path)).collect()
}

/// Writes a case in the layout read by [`load_cases`].
pub fn write_case(dir: &Path, c: &Case) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&c.volume, dir.join(format!("{}_image.vol", c.id)))?;
    write_mask(&c.liver, dir.join(format!("{}_liver.vol", c.id)))?;
    write_mask(&c.lesion, dir.join(format!("{}_lesion.vol", c.id)))
}

/// Splits sorted cases into (train, validation) with the trailing
/// `val_fraction` held out, keeping at least one case on each side.
pub fn split_cases(cases: &[Case], val_fraction: f64) -> Result<(&[Case], &[Case])> {
    if cases.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let val = ((cases.len() as f64 * val_fraction).ceil() as usize).clamp(1, cases.len() - 1);
    Ok(cases.split_at(cases.len() - val))
}

/// Clipped-intensity statistics of the given cases.
pub fn dataset_stats(cases: &[Case], clip: ClipRange) -> Result<DatasetStats> {
    let clipped: Vec<Volume> = cases.iter().map(|c| clip_hu(&c.volume, clip.lo, clip.hi)).collect::<Result<_>>()?;
    compute_stats(&clipped)
}

/// Training samples for one stage: full slices with liver targets, or
/// seeded crops around the liver with lesion targets.
pub fn stage_batch(
    cases: &[Case],
    kind: StageKind,
    stage: &StageConfig,
    clip: ClipRange,
    stats: &DatasetStats,
    seed: u64,
) -> Result<SliceBatch> {
    let pad = stats.apply(clip.lo);
    let fit = stage.effective_fit();
    let mut batches = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let z = standardize(&clip_hu(&c.volume, clip.lo, clip.hi)?, stats);
        let target = match kind {
            StageKind::Liver => &c.liver,
            StageKind::Lesion => &c.lesion,
        };
        let b = match stage.crop {
            Some(crop) => {
                if c.liver.is_empty() {
                    continue;
                }
                let s = crate::networks::mix_seed(seed, i as u64);
                extract_training_crops(&z, &c.liver, target, stage.axis, &crop, pad, &c.id, s)?
            }
            None => extract_full_slices(&z, target, stage.axis, &fit, pad, &c.id, None)?,
        };
        batches.push(b);
    }
    SliceBatch::concat(batches)
}

/// Everything a finished stage run leaves behind.
pub struct StageRun {
    pub outcome: TrainOutcome,
    pub stats: DatasetStats,
    pub context: ModelContext,
    /// Checkpoint directory of the best epoch, when checkpoints were written.
    pub best_checkpoint: Option<PathBuf>,
}

/// Computes statistics on `train_cases`, assembles both sample sets and trains.
pub fn train_stage(
    kind: StageKind,
    stage: &StageConfig,
    clip: ClipRange,
    train_cases: &[Case],
    val_cases: &[Case],
    stats: Option<DatasetStats>,
) -> Result<StageRun> {
    stage.validate()?;
    let stats = match stats {
        Some(s) => s,
        None => dataset_stats(train_cases, clip).stage("statistics")?,
    };
    let seed = stage.train.seed;
    let train_set = stage_batch(train_cases, kind, stage, clip, &stats, seed).stage("training samples")?;
    let val_set = stage_batch(val_cases, kind, stage, clip, &stats, seed ^ 0x5eed).stage("validation samples")?;
    let context = ModelContext { stats: Some(stats), clip, axis: stage.axis, fit: stage.effective_fit(), crop: stage.crop };
    let outcome = train(&stage.train, &train_set, &val_set, &context).stage("training")?;
    let best_checkpoint = stage.train.checkpoint_dir.as_ref().map(|d| checkpoint_path(d, outcome.best_epoch));
    Ok(StageRun { outcome, stats, context, best_checkpoint })
}
