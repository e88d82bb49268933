use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lesion_cascade::config::{
    canonical_mask, case_images, dataset_stats, load_case, split_cases, train_stage, write_case, Case,
    PipelineConfig, StageKind,
};
use lesion_cascade::io::{load_any, read_mask};
use lesion_cascade::metrics::{aggregate, evaluate_case, EvalCase};
use lesion_cascade::networks::{NetworkConfig, TiramisuConfig, UNetConfig};
use lesion_cascade::orient::reorient_to_canonical;
use lesion_cascade::overlay::render_overlay;
use lesion_cascade::phantom::generate_case;
use lesion_cascade::pipeline::{predict_file, PostprocessConfig, StageModel};
use lesion_cascade::preprocess::{clip_hu, standardize, DatasetStats};
use lesion_cascade::Axis;

/// Cascaded liver and liver-lesion segmentation of CT volumes.
#[derive(Parser)]
#[command(name = "lesion-cascade", version)]
struct Cli {
    /// Worker threads for per-volume work; 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Intensity statistics of the training split, optionally with standardized volumes.
    Preprocess(PreprocessArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Train the liver stage.
    TrainLiver(StageArgs),
    /// Train the lesion stage.
    TrainLesion(StageArgs),
    /// Run the cascade on volumes and write liver and lesion masks.
    Predict(PredictArgs),
    /// Score predicted masks against references and write a CSV report.
    Evaluate(EvaluateArgs),
    /// Write synthetic phantom cases.
    Phantom(PhantomArgs),
    /// Print a network's layer and parameter table.
    Describe(DescribeArgs),
    /// Render one slice of a prediction over its reference as a PPM image.
    RenderOverlay(OverlayArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Statistics file; defaults to `paths.stats`, then `<paths.output>/stats.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write clipped, standardized canonical volumes and masks here.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<paths.checkpoints>/<stage>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    stage: StageKind,
    #[command(flatten)]
    common: StageArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Liver checkpoint directory.
    #[arg(long)]
    liver_net: PathBuf,
    /// Lesion checkpoint directory.
    #[arg(long)]
    lesion_net: PathBuf,
    /// Volume files, or directories searched for `*_image.vol` / `*_image.nii`.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory for `<case>_liver.vol` and `<case>_lesion.vol`.
    #[arg(long)]
    out: PathBuf,
    /// Postprocessing keys from a pipeline config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    dilate: Option<usize>,
    #[arg(long)]
    close: Option<usize>,
    #[arg(long)]
    connectivity: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which mask to score.
    #[arg(long, value_parser = parse_stage, default_value = "lesion")]
    target: StageKind,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    n: usize,
    /// Edge length, or `x,y,z`.
    #[arg(long, value_parser = parse_size, default_value = "64")]
    size: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    /// `unet` or `tiramisu` with default settings.
    #[arg(long, conflicts_with = "config")]
    net: Option<String>,
    /// Describe the network of a stage in this pipeline config.
    #[arg(long, requires = "stage")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_stage)]
    stage: Option<StageKind>,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_parser = parse_axis, default_value = "axial")]
    axis: Axis,
    #[arg(long)]
    slice: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_stage(s: &str) -> std::result::Result<StageKind, String> {
    s.parse().map_err(|e: lesion_cascade::Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: lesion_cascade::Error| e.to_string())
}

fn parse_size(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let size = match parts[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(format!("expected N or X,Y,Z, got {s:?}")),
    };
    if size.contains(&0) {
        return Err("size must be positive".into());
    }
    Ok(size)
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::load(path).with_context(|| format!("config: {}", path.display()))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} directory {} does not exist", path.display());
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    let images = case_images(dir).with_context(|| format!("load cases: {}", dir.display()))?;
    images
        .par_iter()
        .map(|(id, path)| load_case(dir, id, path).with_context(|| format!("load cases: {id}")))
        .collect()
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let data = args.data.unwrap_or(cfg.paths.data.clone());
    require_dir(&data, "data")?;
    let cases = load_dataset(&data)?;
    let (train, _) = split_cases(&cases, cfg.val_fraction).context("split cases")?;
    let stats = dataset_stats(train, cfg.clip).context("statistics")?;
    let out = args.out.or(cfg.paths.stats.clone()).unwrap_or_else(|| cfg.paths.output.join("stats.json"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("write statistics: {}", parent.display()))?;
    }
    stats.save(&out).context("write statistics")?;
    println!("mean {:.6} std {:.6} over {} training cases -> {}", stats.mean, stats.std, train.len(), out.display());
    if let Some(dir) = args.write {
        cases.par_iter().try_for_each(|c| -> Result<()> {
            let z = standardize(&clip_hu(&c.volume, cfg.clip.lo, cfg.clip.hi)?, &stats);
            write_case(&dir, &Case { volume: z, ..c.clone() }).with_context(|| format!("write volumes: {}", c.id))
        })?;
        println!("wrote {} standardized cases to {}", cases.len(), dir.display());
    }
    Ok(())
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let path = entry?.path();
        std::fs::copy(&path, to.join(path.file_name().unwrap()))?;
    }
    Ok(())
}

fn train(kind: StageKind, args: StageArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let data = args.data.unwrap_or(cfg.paths.data.clone());
    require_dir(&data, "data")?;
    let name = match kind {
        StageKind::Liver => "liver",
        StageKind::Lesion => "lesion",
    };
    let out = args.out.unwrap_or_else(|| cfg.paths.checkpoints.join(name));
    let clip = cfg.clip;
    let val_fraction = cfg.val_fraction;
    let stats = match &cfg.paths.stats {
        Some(p) if p.exists() => Some(DatasetStats::load(p).with_context(|| format!("read statistics: {}", p.display()))?),
        _ => None,
    };
    let stage = cfg.stage_mut(kind);
    if let Some(e) = args.epochs {
        stage.train.epochs = e;
    }
    if let Some(s) = args.seed {
        stage.train.seed = s;
    }
    stage.train.checkpoint_dir = Some(out.clone());
    stage.validate().context("config")?;
    let stage = stage.clone();

    let cases = load_dataset(&data)?;
    let (train_cases, val_cases) = split_cases(&cases, val_fraction).context("split cases")?;
    std::fs::create_dir_all(&out).with_context(|| format!("create {}", out.display()))?;
    let started = Instant::now();
    let run = train_stage(kind, &stage, clip, train_cases, val_cases, stats).context(format!("train {name}"))?;
    run.stats.save(out.join("stats.json")).context("write statistics")?;
    println!("epoch,loss,val_score,lr,seconds");
    for r in &run.outcome.log.records {
        println!("{},{:.6},{:.6},{:e},{:.2}", r.epoch, r.loss, r.val_score, r.lr, r.seconds);
    }
    if let Some(best) = &run.best_checkpoint {
        copy_dir(best, &out.join("best")).context("copy best checkpoint")?;
    }
    println!(
        "best epoch {} of {} in {:.1}s; checkpoint {}",
        run.outcome.best_epoch,
        stage.train.epochs,
        started.elapsed().as_secs_f64(),
        out.join("best").display()
    );
    Ok(())
}

fn volume_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(case_images(p).with_context(|| format!("list {}", p.display()))?.into_iter().map(|(_, f)| f));
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            bail!("input {} does not exist", p.display());
        }
    }
    Ok(out)
}

fn predict(args: PredictArgs) -> Result<()> {
    let mut post = match &args.config {
        Some(c) => load_config(c)?.postprocess,
        None => PostprocessConfig::default(),
    };
    if let Some(t) = args.threshold {
        post.threshold = t;
    }
    if args.dilate.is_some() {
        post.dilate = args.dilate;
    }
    if args.close.is_some() {
        post.close = args.close;
    }
    if let Some(c) = args.connectivity {
        post.connectivity = c;
    }
    post.validate().context("postprocess")?;
    let volumes = volume_inputs(&args.inputs)?;
    let liver = StageModel::load(&args.liver_net).with_context(|| format!("load liver checkpoint {}", args.liver_net.display()))?;
    let lesion = StageModel::load(&args.lesion_net).with_context(|| format!("load lesion checkpoint {}", args.lesion_net.display()))?;
    let lines: Vec<String> = volumes
        .par_iter()
        .map(|v| {
            let files = predict_file(&liver, &lesion, v, &args.out, &post).with_context(|| format!("predict {}", v.display()))?;
            let p = &files.prediction;
            Ok(format!(
                "{}: {:.2}s, liver {} voxels, lesion {} voxels",
                v.display(),
                p.seconds,
                p.liver.count(),
                p.lesion.count()
            ))
        })
        .collect::<Result<_>>()?;
    for l in lines {
        eprintln!("{l}");
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    require_dir(&args.pred, "prediction")?;
    require_dir(&args.gt, "reference")?;
    let suffix = match args.target {
        StageKind::Liver => "_liver.vol",
        StageKind::Lesion => "_lesion.vol",
    };
    let mut ids: Vec<String> = std::fs::read_dir(&args.gt)
        .with_context(|| format!("evaluate: {}", args.gt.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_string_lossy().strip_suffix(suffix).map(str::to_string))
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("evaluate: no *{suffix} references in {}", args.gt.display());
    }
    let read = |p: PathBuf| -> Result<lesion_cascade::Mask> {
        let m = read_mask(&p).with_context(|| format!("evaluate: read {}", p.display()))?;
        Ok(canonical_mask(&m)?)
    };
    let cases = ids
        .par_iter()
        .map(|id| {
            let gt = read(args.gt.join(format!("{id}{suffix}")))?;
            let pred = read(args.pred.join(format!("{id}{suffix}")))?;
            let liver_path = args.gt.join(format!("{id}_liver.vol"));
            let liver_gt = if args.target == StageKind::Lesion && liver_path.exists() { Some(read(liver_path)?) } else { None };
            let spacing = gt.spacing;
            let case = EvalCase { id: id.clone(), pred, gt, liver_gt, spacing };
            evaluate_case(&case).with_context(|| format!("evaluate: {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(cases)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, report.to_csv()).with_context(|| format!("write {}", args.out.display()))?;
    print!("{}", report.summary());
    Ok(())
}

fn phantom(args: PhantomArgs) -> Result<()> {
    if args.n == 0 {
        bail!("phantom: --n must be at least 1");
    }
    (0..args.n).into_par_iter().try_for_each(|i| -> Result<()> {
        let p = generate_case(i, args.size, args.seed).with_context(|| format!("phantom {i}"))?;
        write_case(&args.out, &Case::from(p)).with_context(|| format!("phantom {i}: write"))
    })?;
    println!("wrote {} cases of {:?} to {}", args.n, args.size, args.out.display());
    Ok(())
}

fn describe(args: DescribeArgs) -> Result<()> {
    let net = match (&args.net, &args.config, args.stage) {
        (Some(n), _, _) => match n.as_str() {
            "unet" => NetworkConfig::Unet(UNetConfig::default()),
            "tiramisu" => NetworkConfig::Tiramisu(TiramisuConfig::default()),
            other => bail!("describe: unknown network {other:?}, expected unet or tiramisu"),
        },
        (None, Some(c), Some(stage)) => load_config(c)?.stage(stage).train.network.clone(),
        _ => bail!("describe: give --net, or --config with --stage"),
    };
    let graph = net.build::<f32>(0).context("describe: build")?;
    print!("{}", graph.describe());
    Ok(())
}

fn overlay(args: OverlayArgs) -> Result<()> {
    let image = reorient_to_canonical(&load_any(&args.image).context("overlay: read image")?)?;
    let gt = canonical_mask(&read_mask(&args.gt).context("overlay: read reference")?)?;
    let pred = canonical_mask(&read_mask(&args.pred).context("overlay: read prediction")?)?;
    if gt.dims != image.dims || pred.dims != image.dims {
        bail!("overlay: image {:?}, reference {:?} and prediction {:?} differ", image.dims.0, gt.dims.0, pred.dims.0);
    }
    let (count, rows, cols) = args.axis.slice_shape(image.dims);
    if args.slice >= count {
        bail!("overlay: slice {} out of range 0..{count}", args.slice);
    }
    let ppm = render_overlay(
        &gt.slice(args.axis, args.slice),
        &pred.slice(args.axis, args.slice),
        &image.slice(args.axis, args.slice),
        rows,
        cols,
    )?;
    std::fs::write(&args.out, ppm).with_context(|| format!("overlay: write {}", args.out.display()))?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("thread pool")?;
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a.stage, a.common),
        Command::TrainLiver(a) => train(StageKind::Liver, a),
        Command::TrainLesion(a) => train(StageKind::Lesion, a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Phantom(a) => phantom(a),
        Command::Describe(a) => describe(a),
        Command::RenderOverlay(a) => overlay(a),
    }
}
