//! Command-line entry points: `train`, `eval`, `infer` and `synth`.
//!
//! Exit statuses: 0 on success, 2 for configuration/validation problems
//! (invalid config keys, architecture mismatches, missing data), 1 for
//! runtime failures (I/O, non-finite losses).

use crate::autodiff::Var;
use crate::config::{EvalCrop, RunConfig};
use crate::data::{self, EvalDatasetKind, SplitMode};
use crate::geometry::{disp_to_depth, DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH};
use crate::metrics::{self, DepthMetrics, EvalOptions};
use crate::params::{Binder, Checkpoint};
use crate::trainer::{build_models, Models, Trainer};
use crate::viz;
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "graphdepth",
    version,
    about = "Self-supervised monocular depth estimation with a graph-convolutional decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the depth and pose networks.
    Train(TrainArgs),
    /// Evaluate a checkpoint against ground-truth depth.
    Eval(EvalArgs),
    /// Predict depth for images and write depth + disparity panels.
    Infer(InferArgs),
    /// Generate a synthetic dataset in the raw-drive layout.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the similarity threshold P.
    #[arg(long = "P")]
    p: Option<f64>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config file; defaults to the snapshot embedded in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset kind: kitti or make3d.
    #[arg(long)]
    dataset: Option<String>,
    /// Depth cap in meters (default 80, or 70 for make3d).
    #[arg(long)]
    max_depth: Option<f64>,
    /// Disable per-image median scaling.
    #[arg(long)]
    no_median_scaling: bool,
    /// Evaluation crop: none or garg.
    #[arg(long)]
    crop: Option<String>,
    /// Override the test split file.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Override the dataset root.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Output directory for the metrics report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: evaluate the ground truth against itself instead of the
    /// network prediction.
    #[arg(long, hide = true)]
    oracle_gt: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input images.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Colormap for the disparity panel.
    #[arg(long, default_value = "magma")]
    colormap: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Number of frames to render.
    #[arg(long, default_value_t = 22)]
    frames: usize,
    /// Per-frame camera translation dx,dy,dz.
    #[arg(long, default_value = "0.05,0,0", value_parser = parse_triple)]
    motion: Triple,
    /// Comma-separated strip depths in meters.
    #[arg(long, default_value = "30,42,55,68", value_parser = parse_depths)]
    plane_depths: Depths,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Focal length as a multiple of the image width.
    #[arg(long, default_value_t = 31.25)]
    focal_scale: f64,
}

#[derive(Clone, Debug)]
struct Triple([f64; 3]);

fn parse_triple(s: &str) -> std::result::Result<Triple, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected dx,dy,dz".into());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok(Triple(out))
}

#[derive(Clone, Debug)]
struct Depths(Vec<f64>);

fn parse_depths(s: &str) -> std::result::Result<Depths, String> {
    let vals: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    vals.map(Depths).map_err(|e| format!("{e}"))
}

/// Parse arguments and run; returns the process exit status.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_status(&e)
        }
    }
}

fn exit_status(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::Checkpoint(_)
        | Error::Dataset(_) => 2,
        Error::Io { .. } | Error::NonFinite(_) => 1,
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = args.p {
        cfg.train.p = p;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(out) = args.out {
        cfg.output.dir = out;
    }
    cfg.validate()?;
    if cfg.output.dir.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("output.dir must be set".into()));
    }

    let snapshot = cfg.to_toml();
    let out_dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    std::fs::write(out_dir.join("config.toml"), &snapshot)
        .map_err(|e| Error::io("config.toml", e))?;

    let mut trainer = Trainer::new(
        cfg.train_config(),
        cfg.model_spec()?,
        cfg.data_spec(),
        &out_dir,
        snapshot,
    )?;
    let log_path = out_dir.join("train.log");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?,
    );
    let report = trainer.fit(&mut log)?;
    log.flush().map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!(
        "training done: initial l_final {:.6}, final l_final {:.6}, best val {:.6}",
        report.initial_train_loss, report.final_train_loss, report.best_val_loss
    );
    println!("checkpoints: {}", report.best_checkpoint.display());
    Ok(())
}

/// Rebuild the networks a checkpoint was trained with and load its weights.
pub fn models_from_checkpoint(
    path: &Path,
    config_override: Option<&Path>,
) -> Result<(Models, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = match config_override {
        Some(p) => RunConfig::load(p)?,
        None => {
            let text = ck.string("config").ok_or_else(|| {
                Error::Checkpoint("checkpoint carries no config snapshot; pass --config".into())
            })?;
            RunConfig::parse(text)?
        }
    };
    let mut models = build_models(&cfg.model_spec()?, &cfg.train_config())?;
    let params = ck.params_with_prefix("params.");
    models.store.load_from(&params)?;
    Ok((models, cfg))
}

/// Depth prediction at the ground truth resolution: resize to the model
/// input, run the network, upsample the finest disparity by 2, resize to the
/// requested grid and convert to metric depth.
pub fn predict_depth(
    models: &Models,
    image: &Array3<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<f64>> {
    let (w, h) = (models.depth.cfg.input_width, models.depth.cfg.input_height);
    let resized = viz::resize_bilinear_3d(image, h, w);
    let binder = Binder::new(&models.store, None);
    let pyramid = models
        .depth
        .predict_disparity(&binder, &Var::constant(resized.into_dyn()))?;
    let disp1: Array2<f64> = pyramid
        .disp1()
        .reshape(&[1, h / 2, w / 2])
        .upsample_nearest(2)
        .reshape(&[h, w])
        .value()
        .clone()
        .into_dimensionality()
        .expect("2-D disparity");
    let disp_full = viz::resize_bilinear_2d(&disp1, out_h, out_w);
    disp_to_depth(&disp_full, DEFAULT_MIN_DEPTH, DEFAULT_MAX_DEPTH)
}

/// Validity crop applied to the ground truth before evaluation.
fn apply_crop(gt: &mut Array2<f64>, crop: EvalCrop, dataset: EvalDatasetKind) {
    let (h, w) = gt.dim();
    match (crop, dataset) {
        (EvalCrop::Garg, _) => {
            let r0 = (0.40810811 * h as f64).round() as usize;
            let r1 = (0.99189189 * h as f64).round() as usize;
            let c0 = (0.03594771 * w as f64).round() as usize;
            let c1 = (0.96405229 * w as f64).round() as usize;
            for ((i, j), v) in gt.indexed_iter_mut() {
                if i < r0 || i >= r1 || j < c0 || j >= c1 {
                    *v = 0.0;
                }
            }
        }
        (EvalCrop::None, EvalDatasetKind::Make3d) => {
            // Standard 2:1 center crop: keep the central rows so that the
            // evaluated region is twice as wide as tall.
            let keep = (w / 2).min(h);
            let r0 = (h - keep) / 2;
            let r1 = r0 + keep;
            for ((i, _), v) in gt.indexed_iter_mut() {
                if i < r0 || i >= r1 {
                    *v = 0.0;
                }
            }
        }
        (EvalCrop::None, EvalDatasetKind::Kitti) => {}
    }
}

/// Mean absolute log10 error over valid pixels (the fourth column of the
/// Make3D row).
fn log10_error(pred: &Array2<f64>, gt: &Array2<f64>, opts: &EvalOptions) -> Result<f64> {
    let valid = gt.mapv(|g| if g > opts.min_depth && g < opts.max_depth { 1.0 } else { 0.0 });
    let scaled = if opts.median_scaling {
        metrics::median_scale(pred, gt, &valid)?
    } else {
        pred.clone()
    };
    let mut total = 0.0;
    let mut n = 0.0;
    for ((p, g), m) in scaled.iter().zip(gt.iter()).zip(valid.iter()) {
        if *m != 0.0 {
            let p = p.clamp(opts.min_depth, opts.max_depth);
            total += (p.log10() - g.log10()).abs();
            n += 1.0;
        }
    }
    Ok(total / n)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (models, mut cfg) = models_from_checkpoint(&args.checkpoint, args.config.as_deref())?;
    if let Some(d) = args.dataset {
        cfg.eval.dataset = d;
    }
    if let Some(m) = args.max_depth {
        cfg.eval.max_depth = Some(m);
    }
    if args.no_median_scaling {
        cfg.eval.median_scaling = false;
    }
    if let Some(c) = args.crop {
        cfg.eval.crop = c;
    }
    if let Some(root) = args.root {
        cfg.data.root = root;
    }
    if let Some(split) = args.split {
        cfg.data.test_split = split;
    }
    cfg.validate()?;
    let dataset = cfg.eval_dataset()?;
    let crop = cfg.eval_crop()?;
    let max_depth = cfg.eval.max_depth.unwrap_or(match dataset {
        EvalDatasetKind::Kitti => 80.0,
        EvalDatasetKind::Make3d => 70.0,
    });
    let opts = EvalOptions {
        min_depth: cfg.eval.min_depth,
        max_depth,
        median_scaling: cfg.eval.median_scaling,
    };
    let out_dir = if cfg.output.dir.as_os_str().is_empty() {
        args.out.clone().unwrap_or_else(|| PathBuf::from("."))
    } else {
        args.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let ids = data::load_split(&cfg.data.root, &cfg.data.test_split, SplitMode::Test)?;
    if ids.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let mut records: Vec<(String, DepthMetrics)> = Vec::with_capacity(ids.len());
    let mut log10_sum = 0.0;
    for id in &ids {
        let sample = data::load_eval_sample(&cfg.data.root, id, dataset)?;
        let (h, w) = sample.gt_depth.dim();
        let mut gt = sample.gt_depth.clone();
        apply_crop(&mut gt, crop, dataset);
        let pred = if args.oracle_gt {
            gt.clone()
        } else {
            predict_depth(&models, &sample.image, h, w)?
        };
        let m = metrics::evaluate(&pred, &gt, &opts)?;
        if dataset == EvalDatasetKind::Make3d {
            log10_sum += log10_error(&pred, &gt, &opts)?;
        }
        records.push((id.clone(), m));
    }
    let agg = metrics::aggregate(&records.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    let report_path = out_dir.join("metrics.txt");
    let mut report = std::io::BufWriter::new(
        std::fs::File::create(&report_path)
            .map_err(|e| Error::io(report_path.display().to_string(), e))?,
    );
    metrics::write_report(&mut report, &records, &agg)
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    report
        .flush()
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;

    match dataset {
        EvalDatasetKind::Kitti => {
            println!("abs_rel sq_rel rmse rmse_log delta1 delta2 delta3");
            println!(
                "{:.4} {:.4} {:.4} {:.4} {:.2} {:.2} {:.2}",
                agg.abs_rel, agg.sq_rel, agg.rmse, agg.rmse_log, agg.delta1, agg.delta2, agg.delta3
            );
        }
        EvalDatasetKind::Make3d => {
            let log10 = log10_sum / ids.len() as f64;
            println!("abs_rel sq_rel rmse log10");
            println!("{:.4} {:.4} {:.4} {:.4}", agg.abs_rel, agg.sq_rel, agg.rmse, log10);
        }
    }
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let map = viz::colormap(&args.colormap)?;
    let (models, _) = models_from_checkpoint(&args.checkpoint, None)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for path in &args.images {
        let img = image::open(path)
            .map_err(|e| Error::Dataset(format!("decoding {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut arr = Array3::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                arr[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
            }
        }
        let depth = predict_depth(&models, &arr, h, w)?;
        let disp = crate::geometry::depth_to_disp(&depth, DEFAULT_MIN_DEPTH, DEFAULT_MAX_DEPTH)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad image path {}", path.display())))?;
        data::encode_depth_png(&args.out.join(format!("{stem}_depth.png")), &depth)?;
        viz::save_disparity_panel(&args.out.join(format!("{stem}_disp.png")), &disp, map)?;
    }
    println!("wrote {} image pair(s) to {}", args.images.len(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = data::SynthConfig {
        out: args.out,
        frames: args.frames,
        motion: args.motion.0,
        plane_depths: args.plane_depths.0,
        seed: args.seed,
        width: args.width,
        height: args.height,
        focal_scale: args.focal_scale,
    };
    let root = data::generate_synthetic(&cfg)?;
    println!("synthetic dataset at {}", root.display());
    Ok(())
}
