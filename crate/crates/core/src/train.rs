//! Epoch loop, validation scoring, checkpoints and best-epoch selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::io::{read_f32_blob, write_f32_blob};
use crate::layers::{LayerParams, Mode};
use crate::losses::LossKind;
use crate::networks::{mix_seed, NetworkConfig, NetworkGraph, TiramisuConfig, UNetConfig};
use crate::optim::{adam_step, lr_at, AdamState, LrSchedule};
use crate::preprocess::{ClipRange, CropConfig, DatasetStats, SliceBatch, SliceFit};
use crate::tensor::{Shape, Tensor};
use crate::volume::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub halve_every: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    5
}

impl OptimizerConfig {
    pub fn new(lr: f64, halve_every: usize) -> Self {
        OptimizerConfig { lr, halve_every, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.halve_every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
    /// Random subset drawn from the training set each epoch; all samples when absent.
    #[serde(default)]
    pub samples_per_epoch: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-scale liver stage: default U-Net, BCE, 50 epochs of 5, 1e-5 halved every 15.
    pub fn full_scale_liver() -> Self {
        TrainConfig {
            network: NetworkConfig::Unet(UNetConfig::default()),
            loss: LossKind::Bce,
            optimizer: OptimizerConfig::new(1e-5, 15),
            epochs: 50,
            batch_size: 5,
            augment: AugmentConfig::default(),
            seed: 0,
            samples_per_epoch: None,
            checkpoint_dir: None,
        }
    }

    /// Full-scale lesion stage: default Tiramisu, Tversky (β = 0.7), 3e-6 halved every 10.
    pub fn full_scale_lesion() -> Self {
        TrainConfig {
            network: NetworkConfig::Tiramisu(TiramisuConfig::default()),
            loss: LossKind::Tversky { alpha: 0.3, beta: 0.7, smooth: 1.0 },
            optimizer: OptimizerConfig::new(3e-6, 10),
            epochs: 50,
            batch_size: 5,
            augment: AugmentConfig::enabled(),
            seed: 0,
            samples_per_epoch: None,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("samples_per_epoch must be >= 1".into()));
        }
        self.optimizer.schedule()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// How a stage's inputs were prepared; stored with every checkpoint so
/// inference can repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelContext {
    #[serde(default)]
    pub stats: Option<DatasetStats>,
    #[serde(default)]
    pub clip: ClipRange,
    pub axis: Axis,
    #[serde(default)]
    pub fit: SliceFit,
    #[serde(default)]
    pub crop: Option<CropConfig>,
}

impl Default for ModelContext {
    fn default() -> Self {
        ModelContext { stats: None, clip: ClipRange::default(), axis: Axis::Axial, fit: SliceFit::default(), crop: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_score: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_score,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.epoch, r.loss, r.val_score, r.lr, r.seconds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::HeaderParse(format!("training log must start with {:?}", Self::CSV_HEADER)));
        }
        let mut records = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::HeaderParse(format!("training log line {}: {line:?}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                loss: num(1)?,
                val_score: num(2)?,
                lr: num(3)?,
                seconds: num(4)?,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Epoch with the highest validation score; ties go to the earliest.
pub fn select_best(log: &TrainLog) -> Result<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in &log.records {
        if best.is_none_or(|b| r.val_score > b.val_score) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch).ok_or(Error::EmptyLog)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub network: NetworkConfig,
    pub context: ModelContext,
    pub epoch: usize,
    pub adam_t: u64,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub adam: Vec<TensorEntry>,
}

fn blob_name(i: usize, tag: &str) -> String {
    format!("{tag}_{i:04}.bin")
}

/// Writes parameters, batch-norm running statistics and Adam moments.
pub fn save_checkpoint(
    dir: &Path,
    net: &NetworkGraph<f32>,
    adam: Option<&AdamState<f32>>,
    context: &ModelContext,
    epoch: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, (name, t)) in net.trainable().into_iter().enumerate() {
        let file = blob_name(i, "param");
        let shape = t.shape.dims().to_vec();
        write_f32_blob(dir.join(&file), &shape, &t.values)?;
        params.push(TensorEntry { name, file, shape });
    }
    let mut buffers = Vec::new();
    for (i, (name, mean, var)) in net.buffers().into_iter().enumerate() {
        let file = blob_name(i, "buffer");
        let shape = vec![2, mean.len()];
        let values: Vec<f32> = mean.iter().chain(var).copied().collect();
        write_f32_blob(dir.join(&file), &shape, &values)?;
        buffers.push(TensorEntry { name: format!("{name}.running"), file, shape });
    }
    let mut moments = Vec::new();
    if let Some(a) = adam {
        for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
            let file = blob_name(i, "adam");
            let shape = vec![2, m.len()];
            let values: Vec<f32> = m.iter().chain(v).copied().collect();
            write_f32_blob(dir.join(&file), &shape, &values)?;
            moments.push(TensorEntry { name: params[i].name.clone(), file, shape });
        }
    }
    let manifest = Manifest {
        network: net.config().clone(),
        context: context.clone(),
        epoch,
        adam_t: adam.map(|a| a.t).unwrap_or(0),
        params,
        buffers,
        adam: moments,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct LoadedCheckpoint {
    pub network: NetworkGraph<f32>,
    pub adam: Option<AdamState<f32>>,
    pub manifest: Manifest,
}

/// Rebuilds the network from the manifest and restores every tensor,
/// rejecting name or shape disagreements.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(dir)?;
    let mut net: NetworkGraph<f32> = manifest.network.build(0)?;
    let expected: Vec<(String, Vec<usize>)> =
        net.trainable().into_iter().map(|(n, t)| (n, t.shape.dims().to_vec())).collect();
    let found: Vec<(String, Vec<usize>)> = manifest.params.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        return Err(Error::CheckpointMismatch(format!(
            "{}: parameter list does not match the {} graph it names",
            dir.display(),
            match manifest.network {
                NetworkConfig::Unet(_) => "U-Net",
                NetworkConfig::Tiramisu(_) => "Tiramisu",
            }
        )));
    }
    let read = |e: &TensorEntry| -> Result<Vec<f32>> {
        let (shape, values) = read_f32_blob(dir.join(&e.file))?;
        if shape != e.shape {
            return Err(Error::CheckpointMismatch(format!("{}: blob {} has shape {shape:?}, manifest says {:?}", dir.display(), e.file, e.shape)));
        }
        Ok(values)
    };
    let blobs: Vec<Vec<f32>> = manifest.params.iter().map(read).collect::<Result<_>>()?;
    for (t, values) in net.trainable_mut().into_iter().zip(blobs) {
        t.values = values;
        t.grad = None;
    }
    let names: Vec<String> = net.buffers().into_iter().map(|(n, _, _)| format!("{n}.running")).collect();
    if names != manifest.buffers.iter().map(|e| e.name.clone()).collect::<Vec<_>>() {
        return Err(Error::CheckpointMismatch(format!("{}: batch-norm buffers do not match", dir.display())));
    }
    let mut buf_iter = manifest.buffers.iter();
    for p in net.params_mut().values_mut() {
        if let LayerParams::BatchNorm(b) = p {
            let e = buf_iter.next().expect("buffer count checked");
            let values = read(e)?;
            let c = b.running_mean.len();
            if values.len() != 2 * c {
                return Err(Error::CheckpointMismatch(format!("{}: buffer {} has wrong length", dir.display(), e.file)));
            }
            b.running_mean = values[..c].to_vec();
            b.running_var = values[c..].to_vec();
        }
    }
    let adam = if manifest.adam.is_empty() {
        None
    } else {
        if manifest.adam.len() != manifest.params.len() {
            return Err(Error::CheckpointMismatch(format!("{}: optimizer state incomplete", dir.display())));
        }
        let sizes: Vec<usize> = net.trainable_sizes();
        let mut st = AdamState::<f32>::with_defaults(&sizes);
        st.t = manifest.adam_t;
        for (i, e) in manifest.adam.iter().enumerate() {
            let values = read(e)?;
            if values.len() != 2 * sizes[i] {
                return Err(Error::CheckpointMismatch(format!("{}: moment blob {} has wrong length", dir.display(), e.file)));
            }
            st.m[i] = values[..sizes[i]].to_vec();
            st.v[i] = values[sizes[i]..].to_vec();
        }
        Some(st)
    };
    Ok(LoadedCheckpoint { network: net, adam, manifest })
}

/// Pooled soft Dice `2Σpt / (Σp + Σt)`; 1 when both sums vanish.
pub fn soft_dice(pred: &[f32], target: &[f32]) -> f64 {
    let (mut inter, mut sum) = (0f64, 0f64);
    for (p, t) in pred.iter().zip(target) {
        inter += *p as f64 * *t as f64;
        sum += *p as f64 + *t as f64;
    }
    if sum == 0.0 {
        1.0
    } else {
        2.0 * inter / sum
    }
}

/// Eval-mode probabilities for every sample of `images`, in chunks.
pub fn predict_batch(net: &NetworkGraph<f32>, images: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let s = images.shape;
    let per = s.c * s.plane();
    let mut out = Vec::with_capacity(s.n * s.plane());
    let mut start = 0;
    while start < s.n {
        let k = chunk.max(1).min(s.n - start);
        let x = Tensor::from_vec(Shape::new(k, s.c, s.h, s.w), images.values[start * per..(start + k) * per].to_vec())?;
        out.extend(net.infer(&x)?.values);
        start += k;
    }
    Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out)
}

pub fn validation_score(net: &NetworkGraph<f32>, val: &SliceBatch) -> Result<f64> {
    let pred = predict_batch(net, &val.images, 8)?;
    Ok(soft_dice(&pred.values, &val.targets.values))
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    /// Network after the final epoch.
    pub network: NetworkGraph<f32>,
    pub adam: AdamState<f32>,
}

/// Runs `cfg.epochs` epochs of seeded shuffling, optional augmentation and
/// Adam updates. Each epoch is scored on `val` and checkpointed when
/// `cfg.checkpoint_dir` is set. Epoch `e` (1-based) uses `lr_at(e − 1)`.
pub fn train(cfg: &TrainConfig, train_set: &SliceBatch, val: &SliceBatch, context: &ModelContext) -> Result<TrainOutcome> {
    let net: NetworkGraph<f32> = cfg.network.build(cfg.seed)?;
    train_from(cfg, net, train_set, val, context)
}

/// As [`train`] but starting from the given network.
pub fn train_from(
    cfg: &TrainConfig,
    mut net: NetworkGraph<f32>,
    train_set: &SliceBatch,
    val: &SliceBatch,
    context: &ModelContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schedule = cfg.optimizer.schedule()?;
    let o = &cfg.optimizer;
    let mut adam = AdamState::<f32>::new(&net.trainable_sizes(), o.beta1, o.beta2, o.eps);
    let background = context.stats.map(|s| s.apply(context.clip.lo)).unwrap_or(0.0);
    let (h, w) = (train_set.images.shape.h, train_set.images.shape.w);
    let plane = h * w;
    let mut log = TrainLog::default();
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&schedule, epoch - 1);
        let epoch_seed = mix_seed(cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.samples_per_epoch.unwrap_or(order.len()).min(order.len()));

        let mut loss_sum = 0f64;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let mut xs = Vec::with_capacity(idx.len() * plane);
            let mut ts = Vec::with_capacity(idx.len() * plane);
            for &i in idx.iter() {
                let (img, tgt) = train_set.get(i);
                let seed = mix_seed(epoch_seed, i as u64);
                let (img, tgt) = augment(&img, &tgt, h, w, &cfg.augment, background, seed);
                xs.extend(img);
                ts.extend(tgt);
            }
            let shape = Shape::new(idx.len(), 1, h, w);
            let x = Tensor::from_vec(shape, xs)?;
            let t = Tensor::from_vec(shape, ts)?;
            net.set_dropout_seed(mix_seed(epoch_seed, (b as u64) << 32 | 0xd0));
            let y = net.forward(&x, Mode::Train)?;
            let (loss, grad) = cfg.loss.evaluate(&y, &t)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, loss });
            }
            net.zero_grad();
            net.backward(&grad)?;
            adam_step(&mut net.trainable_mut(), &mut adam, lr)?;
            loss_sum += loss;
        }
        let val_score = validation_score(&net, val)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches.len() as f64,
            val_score,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.records.push(record);
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(&checkpoint_path(dir, epoch), &net, Some(&adam), context, epoch)?;
            log.write_csv(dir.join("train_log.csv"))?;
        }
    }
    let best_epoch = select_best(&log)?;
    Ok(TrainOutcome { log, best_epoch, network: net, adam })
}
