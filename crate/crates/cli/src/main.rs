//! `crt` — batch front end: corrupt images, build paired datasets, train
//! the restoration model, restore images, and produce evaluation reports.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crt_core::corruption::{CorruptionParams, KindRequest};
use crt_core::dataset::{build_dataset, Manifest, Split};
use crt_core::error::{CrtError, Result};
use crt_core::imaging::{load_image, save_image};
use crt_core::loss::LossWeights;
use crt_core::model::{checkpoint, restore_image, ModelConfig};
use crt_core::training::{evaluate, format_report_table, train, write_report_jsonl, TrainConfig};

#[derive(Parser)]
#[command(
    name = "crt",
    version,
    about = "Restore corrupted camera observations with an adversarially trained transformer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a seeded corruption to an image or a directory of images.
    Corrupt(CorruptArgs),
    /// Build a paired (corrupted, clean) dataset with a manifest.
    DatasetBuild(DatasetBuildArgs),
    /// Train the restoration generator against its discriminator.
    Train(TrainArgs),
    /// Run the generator over an image or directory.
    Restore(RestoreArgs),
    /// Report per-kind PSNR/SSIM of corrupted and restored images.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct CorruptionOverrides {
    /// Black square side as a fraction of min(H, W).
    #[arg(long)]
    square_fraction: Option<f64>,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Fraction of rows blackened by horizontal lines.
    #[arg(long)]
    line_coverage: Option<f64>,
    /// Horizontal line thickness in rows.
    #[arg(long)]
    line_thickness: Option<usize>,
    /// Minimum number of water drops.
    #[arg(long)]
    drop_count_min: Option<usize>,
    /// Maximum number of water drops.
    #[arg(long)]
    drop_count_max: Option<usize>,
    /// Minimum drop radius as a fraction of min(H, W).
    #[arg(long)]
    drop_radius_min: Option<f64>,
    /// Maximum drop radius as a fraction of min(H, W).
    #[arg(long)]
    drop_radius_max: Option<f64>,
    /// Blend weight of the blurred content inside a drop.
    #[arg(long)]
    drop_alpha: Option<f64>,
}

impl CorruptionOverrides {
    fn apply(&self, mut p: CorruptionParams) -> CorruptionParams {
        if let Some(v) = self.square_fraction {
            p.square_fraction = v;
        }
        if let Some(v) = self.noise_sigma {
            p.noise_sigma = v;
        }
        if let Some(v) = self.line_coverage {
            p.line_coverage = v;
        }
        if let Some(v) = self.line_thickness {
            p.line_thickness = v;
        }
        if let Some(v) = self.drop_count_min {
            p.drop_count.0 = v;
        }
        if let Some(v) = self.drop_count_max {
            p.drop_count.1 = v;
        }
        if let Some(v) = self.drop_radius_min {
            p.drop_radius_frac.0 = v;
        }
        if let Some(v) = self.drop_radius_max {
            p.drop_radius_frac.1 = v;
        }
        if let Some(v) = self.drop_alpha {
            p.drop_alpha = v;
        }
        p
    }
}

#[derive(Args, Serialize)]
struct CorruptArgs {
    /// Input image file or directory of images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Corruption kind token (e.g. gaussian-noise, horizontal-lines-0.2).
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: CorruptionOverrides,
}

#[derive(Args, Serialize)]
struct DatasetBuildArgs {
    /// Directory with one subdirectory of frames per trajectory.
    #[arg(long)]
    frames: PathBuf,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated corruption kind tokens.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train fraction of the train/val split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[command(flatten)]
    overrides: CorruptionOverrides,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directory (holding manifest.jsonl) or manifest path.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoints and history.
    #[arg(long)]
    out: PathBuf,
    /// Named profile providing model and schedule defaults.
    #[arg(long, default_value = "desk", value_parser = ["desk", "libero", "metaworld"])]
    profile: String,
    /// JSON file with {"model": ..., "train": ..., "weights": ...};
    /// overrides the profile entirely.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulation_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    #[arg(long)]
    lambda_adv: Option<f64>,
}

#[derive(Args, Serialize)]
struct RestoreArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image file or directory of images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Report path; JSON lines here, aligned table at `<path>.txt`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// Only run the per-op suites (skip the model-level checks).
    #[arg(long)]
    ops_only: bool,
}

/// Spec for `train --config`.
#[derive(serde::Deserialize, Serialize)]
struct FullTrainSpec {
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default)]
    weights: Option<LossWeights>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including --help/--version, which clap marks
            // as "errors" with zero-ish semantics) print and exit 1 / 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Command::Corrupt(args) => run_corrupt(args),
        Command::DatasetBuild(args) => run_dataset_build(args),
        Command::Train(args) => run_train(args),
        Command::Restore(args) => run_restore(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn log_resolved(subcommand: &str, value: &impl Serialize) {
    match serde_json::to_string(value) {
        Ok(json) => log::info!("{subcommand} resolved config: {json}"),
        Err(e) => log::warn!("{subcommand}: cannot serialize resolved config: {e}"),
    }
}

/// Input files for file-or-directory arguments, sorted for determinism.
fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| CrtError::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                    )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CrtError::Data(format!("no images under {}", input.display())));
        }
        return Ok(files);
    }
    Err(CrtError::Data(format!("{} does not exist", input.display())))
}

fn out_path_for(out: &Path, input: &Path) -> PathBuf {
    let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    out.join(format!("{stem}.png"))
}

fn run_corrupt(args: CorruptArgs) -> Result<()> {
    let request = KindRequest::parse(&args.kind)?;
    let params = args.overrides.apply(CorruptionParams::default());
    params.validate()?;
    log_resolved(
        "corrupt",
        &serde_json::json!({
            "in": args.input, "out": args.out, "kind": args.kind,
            "seed": args.seed, "params": params,
        }),
    );
    let files = collect_inputs(&args.input)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CrtError::io(&args.out, e))?;
    files.par_iter().try_for_each(|file| -> Result<()> {
        let img = load_image(file)?;
        let name = file.file_name().unwrap_or_default().to_string_lossy();
        let spec = request.resolve(
            crt_core::corruption::file_seed(args.seed, &name),
            img.height(),
            img.width(),
            &params,
        )?;
        let corrupted = crt_core::corruption::corrupt(&img, &spec)?;
        save_image(&corrupted, &out_path_for(&args.out, file))
    })?;
    log::info!("corrupted {} file(s) into {}", files.len(), args.out.display());
    Ok(())
}

fn run_dataset_build(args: DatasetBuildArgs) -> Result<()> {
    if args.kinds.is_empty() {
        return Err(CrtError::Usage("--kinds requires at least one kind token".into()));
    }
    let kinds: Vec<KindRequest> =
        args.kinds.iter().map(|t| KindRequest::parse(t)).collect::<Result<_>>()?;
    let params = args.overrides.apply(CorruptionParams::default());
    log_resolved(
        "dataset-build",
        &serde_json::json!({
            "frames": args.frames, "out": args.out, "kinds": args.kinds,
            "seed": args.seed, "split": args.split, "params": params,
        }),
    );
    let manifest = build_dataset(&args.frames, &args.out, &kinds, args.seed, args.split, &params)?;
    log::info!(
        "built {} pairs ({} train / {} val) under {}",
        manifest.pairs.len(),
        manifest.header.train_count,
        manifest.header.val_count,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (model_cfg, mut train_cfg, mut weights) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CrtError::io(path, e))?;
            let spec: FullTrainSpec = serde_json::from_str(&text)
                .map_err(|e| CrtError::Usage(format!("bad config {}: {e}", path.display())))?;
            (spec.model, spec.train, spec.weights.unwrap_or_default())
        }
        None => match args.profile.as_str() {
            "desk" => (ModelConfig::desk(), TrainConfig::desk(), LossWeights::default()),
            "libero" => (ModelConfig::libero(), TrainConfig::libero(), LossWeights::default()),
            "metaworld" => {
                (ModelConfig::metaworld(), TrainConfig::metaworld(), LossWeights::default())
            }
            other => return Err(CrtError::Usage(format!("unknown profile {other}"))),
        },
    };
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.accumulation_steps {
        train_cfg.accumulation_steps = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = args.lambda_l1 {
        weights.l1 = v;
    }
    if let Some(v) = args.lambda_ssim {
        weights.ssim = v;
    }
    if let Some(v) = args.lambda_adv {
        weights.adv = v;
    }
    log_resolved(
        "train",
        &serde_json::json!({
            "dataset": args.dataset, "out": args.out,
            "model": model_cfg, "train": train_cfg, "weights": weights,
        }),
    );
    let manifest = Manifest::load(&args.dataset)?;
    let outcome = train(&manifest, &model_cfg, &train_cfg, &weights, &args.out)?;
    log::info!(
        "training done: best val psnr {:.3} dB; checkpoints at {} and {}",
        outcome.best_val_psnr,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

fn run_restore(args: RestoreArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    log_resolved(
        "restore",
        &serde_json::json!({
            "ckpt": args.ckpt, "in": args.input, "out": args.out, "model": ckpt.config,
        }),
    );
    let files = collect_inputs(&args.input)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CrtError::io(&args.out, e))?;
    files.par_iter().try_for_each(|file| -> Result<()> {
        let img = load_image(file)?;
        let restored = restore_image(&ckpt.config, &ckpt.params, &img)
            .map_err(|e| CrtError::Data(format!("{}: {e}", file.display())))?;
        save_image(&restored, &out_path_for(&args.out, file))
    })?;
    log::info!("restored {} file(s) into {}", files.len(), args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let ckpt = checkpoint::load(&args.ckpt)?;
    log_resolved(
        "eval",
        &serde_json::json!({
            "ckpt": args.ckpt, "dataset": args.dataset, "split": args.split,
            "report": args.report, "model": ckpt.config,
        }),
    );
    let manifest = Manifest::load(&args.dataset)?;
    let rows = evaluate(&ckpt.config, &ckpt.params, &manifest, split)?;
    write_report_jsonl(&args.report, &rows)?;
    let table = format_report_table(&rows);
    let table_path = args.report.with_extension("txt");
    std::fs::write(&table_path, &table).map_err(|e| CrtError::io(&table_path, e))?;
    print!("{table}");
    log::info!("report written to {} and {}", args.report.display(), table_path.display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    log_resolved("gradcheck", &serde_json::json!({ "ops_only": args.ops_only }));
    let start = Instant::now();
    let outcomes =
        if args.ops_only { crt_core::verify::op_suites() } else { crt_core::verify::run_all() };
    let mut failed = 0usize;
    for o in &outcomes {
        println!("{}", o.line());
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "gradcheck: {}/{} suites passed in {:.1}s",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CrtError::Numerical(format!("{failed} gradient suite(s) failed")));
    }
    Ok(())
}
