//! Argument definitions and subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use irdrop_core::analysis::{evaluate, psnr, DEFAULT_HOTSPOT_THRESHOLD};
use irdrop_core::datagen::GenConfig;
use irdrop_core::dataset::{load_inputs, Dataset};
use irdrop_core::npy::{write_npy_file, ArrayRecord, DType};
use irdrop_core::oracle::{compare_labels, problem_from_maps, solve_pde, SolverConfig};
use irdrop_core::train::{train_with, StopReason, TrainConfig};
use irdrop_core::unet::{save_checkpoint, Architecture};

use crate::inference::{predict, Model};
use crate::service::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "irdrop", version, about = "IR-drop surrogate pipeline: data generation, PDE oracle, U-Net training and inference")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (four .npy files).
    Gen(GenArgs),
    /// Solve the grid PDE for dataset samples and compare with their labels.
    Oracle(OracleArgs),
    /// Train a U-Net and write the best checkpoint.
    Train(TrainArgs),
    /// Report MSE and PSNR of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict one sample and print its risk report.
    Predict(PredictArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DTypeArg {
    F4,
    F8,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F4 => DType::F4,
            DTypeArg::F8 => DType::F8,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Regularizer added to the power-grid strength in the label formula.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Gaussian sigma applied to the raw label.
    #[arg(long, default_value_t = 2.0)]
    pub label_sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub blob_count_min: usize,
    #[arg(long, default_value_t = 8)]
    pub blob_count_max: usize,
    #[arg(long, default_value_t = 3.0)]
    pub blob_sigma_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub blob_sigma_max: f64,
    #[arg(long, default_value_t = 4)]
    pub stripe_period_min: usize,
    #[arg(long, default_value_t = 12)]
    pub stripe_period_max: usize,
    /// Minimum power-grid strength.
    #[arg(long, default_value_t = 0.05)]
    pub grid_floor: f64,
    /// Gaussian sigma applied to the noise fields.
    #[arg(long, default_value_t = 4.0)]
    pub noise_sigma: f64,
    /// Element type of the written arrays.
    #[arg(long, value_enum, default_value_t = DTypeArg::F4)]
    pub dtype: DTypeArg,
}

impl GenArgs {
    pub fn config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            n_samples: self.n_samples,
            height: self.height,
            width: self.width,
            eps: self.eps,
            label_sigma: self.label_sigma,
            blob_count_range: (self.blob_count_min, self.blob_count_max),
            blob_sigma_range: (self.blob_sigma_min, self.blob_sigma_max),
            stripe_period_range: (self.stripe_period_min, self.stripe_period_max),
            grid_floor: self.grid_floor,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of samples to solve, starting at `--start` (default: all).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Supply voltage used for the reported voltage range.
    #[arg(long, default_value_t = 1.0)]
    pub vdd: f64,
    /// Relative residual tolerance of the CG solver.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    /// Write the solved IR-drop maps as an (N, H, W) f8 array.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Channel widths of the three U-Net levels.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub widths: Vec<usize>,
    /// Stop before an epoch that would end past this many seconds.
    #[arg(long)]
    pub time_limit_secs: Option<f64>,
    /// History CSV path (default: <out>/history.csv).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed: self.seed,
            time_limit_secs: self.time_limit_secs,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the three input files.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Sample index within the input files.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Hotspot threshold on the predicted map.
    #[arg(long, default_value_t = DEFAULT_HOTSPOT_THRESHOLD)]
    pub threshold: f64,
    /// Write the predicted map as an (H, W) f8 array.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "IRDROP_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Hotspot threshold used when a request omits one.
    #[arg(long, default_value_t = DEFAULT_HOTSPOT_THRESHOLD)]
    pub threshold: f64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Gen(args) => gen(&args, json, out),
        Command::Oracle(args) => oracle(&args, json, out),
        Command::Train(args) => train(&args, json, out),
        Command::Eval(args) => eval(&args, json, out),
        Command::Predict(args) => predict_cmd(&args, json, out),
        Command::Serve(args) => serve(&args),
    }
}

fn emit(out: &mut dyn Write, json: bool, value: serde_json::Value, text: &str) -> Result<()> {
    if json {
        writeln!(out, "{value}")?;
    } else {
        write!(out, "{text}")?;
    }
    Ok(())
}

fn gen(args: &GenArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = args.config();
    let dataset = irdrop_core::datagen::generate_samples(&cfg)?;
    dataset
        .save(&args.out, args.dtype.into())
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    emit(
        out,
        json,
        json!({ "out": args.out, "n_samples": dataset.len(), "config": cfg }),
        &format!("wrote {} samples to {}\n", dataset.len(), args.out.display()),
    )
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn oracle(args: &OracleArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let end = args.count.map_or(dataset.len(), |c| args.start.saturating_add(c));
    if args.start >= dataset.len() || end > dataset.len() {
        bail!(
            "sample range {}..{end} is outside the dataset ({} samples)",
            args.start,
            dataset.len()
        );
    }
    let cfg = SolverConfig {
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let mut solved = Vec::new();
    let mut rows = Vec::new();
    let (mut pearson_sum, mut spearman_sum, mut scored, mut degenerate) = (0.0, 0.0, 0usize, 0usize);
    for index in args.start..end {
        let s = &dataset.samples[index];
        let problem = problem_from_maps(&s.power_grid, &s.cell_density, &s.switching)?;
        let solution = solve_pde(&problem, &cfg).with_context(|| format!("sample {index}"))?;
        let report = compare_labels(&s.ir_drop, &solution.ir_drop)?;
        match (report.pearson, report.spearman) {
            (Some(p), Some(r)) => {
                pearson_sum += p;
                spearman_sum += r;
                scored += 1;
            }
            _ => degenerate += 1,
        }
        rows.push(json!({
            "index": index,
            "iterations": solution.iterations,
            "relative_residual": solution.relative_residual,
            "max_ir_drop": solution.ir_drop.max(),
            "min_voltage": args.vdd - solution.ir_drop.max(),
            "pearson": report.pearson,
            "spearman": report.spearman,
        }));
        solved.push(solution.ir_drop);
    }
    if let Some(path) = &args.out {
        write_npy_file(path, &ArrayRecord::from_grids(&solved)?, DType::F8)?;
    }
    let mean = |sum: f64| (scored > 0).then(|| sum / scored as f64);
    let summary = json!({
        "n_samples": solved.len(),
        "mean_pearson": mean(pearson_sum),
        "mean_spearman": mean(spearman_sum),
        "degenerate": degenerate,
        "samples": rows,
    });
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let text = format!(
        "solved {} samples; mean pearson {}, mean spearman {}, {degenerate} degenerate\n",
        solved.len(),
        fmt(mean(pearson_sum)),
        fmt(mean(spearman_sum)),
    );
    emit(out, json, summary, &text)
}

fn train(args: &TrainArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let config = args.config();
    let widths: [usize; 3] = args
        .widths
        .as_slice()
        .try_into()
        .context("--widths takes exactly three values")?;
    let arch = Architecture::new(widths)?;
    let dataset = load_dataset(&args.data)?;
    let outcome = train_with(&dataset, &config, arch, |r| {
        log::info!("epoch {} train {:.4e} val {:.4e}", r.epoch, r.train_loss, r.val_loss);
    })?;
    if outcome.history.is_empty() {
        bail!("training produced no finite epoch: {:?}", outcome.stop_reason);
    }
    let stop = match &outcome.stop_reason {
        StopReason::Patience => "patience".to_string(),
        StopReason::MaxEpochs => "max_epochs".to_string(),
        StopReason::TimeLimit => "time_limit".to_string(),
        StopReason::NonFinite(msg) => format!("non_finite: {msg}"),
    };
    let first = &dataset.samples[0].ir_drop;
    let mut meta = BTreeMap::new();
    meta.insert("best_epoch".to_string(), json!(outcome.best_epoch));
    meta.insert("best_val_loss".to_string(), json!(outcome.best_val_loss));
    meta.insert("stop_reason".to_string(), json!(stop));
    meta.insert("train_config".to_string(), json!(config));
    meta.insert("height".to_string(), json!(first.height()));
    meta.insert("width".to_string(), json!(first.width()));
    save_checkpoint(&outcome.best, &args.out, meta)
        .with_context(|| format!("writing checkpoint to {}", args.out.display()))?;
    let history = args.history.clone().unwrap_or_else(|| args.out.join("history.csv"));
    fs::write(&history, outcome.history_csv()).with_context(|| format!("writing {}", history.display()))?;

    let val_psnr = psnr(outcome.best_val_loss, 1.0)?;
    let summary = json!({
        "checkpoint": args.out,
        "history": history,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "best_val_psnr_db": val_psnr.is_finite().then_some(val_psnr),
        "epochs_run": outcome.history.len(),
        "stop_reason": stop,
    });
    let text = format!(
        "best epoch {} of {}: val mse {:.4e}, psnr {:.2} dB ({stop}); checkpoint {}\n",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_loss,
        val_psnr,
        args.out.display()
    );
    emit(out, json, summary, &text)
}

fn load_model(dir: &Path) -> Result<Model> {
    Model::load(dir).with_context(|| format!("loading checkpoint from {}", dir.display()))
}

fn eval(args: &EvalArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let report = evaluate(&model.params, &dataset)?;
    let text = format!(
        "mse {:.6e}, psnr {:.3} dB over {} samples\n",
        report.mse, report.psnr_db, report.n_samples
    );
    emit(out, json, serde_json::to_value(&report)?, &text)
}

fn predict_cmd(args: &PredictArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let inputs = load_inputs(&args.inputs).with_context(|| format!("loading inputs from {}", args.inputs.display()))?;
    let maps = inputs.get(args.index).with_context(|| {
        format!(
            "index {} out of range: {} holds {} samples",
            args.index,
            args.inputs.display(),
            inputs.len()
        )
    })?;
    let prediction = predict(&model.params, maps, args.threshold)?;
    if let Some(path) = &args.out {
        write_npy_file(path, &ArrayRecord::from_grid(&prediction.ir_drop), DType::F8)?;
    }
    let r = &prediction.report;
    let mut value = serde_json::to_value(r)?;
    value["inference_ms"] = json!(prediction.inference_ms);
    value["model_version"] = json!(model.version);
    let text = format!(
        "max_ir_drop: {}\nmean_ir_drop: {}\nhotspot_count: {}\nrisk_level: {}\nthreshold_used: {}\ninference_ms: {:.3}\n",
        r.max_ir_drop, r.mean_ir_drop, r.hotspot_count, r.risk_level, r.threshold_used, prediction.inference_ms
    );
    emit(out, json, value, &text)
}

fn serve(args: &ServeArgs) -> Result<()> {
    if !args.threshold.is_finite() {
        bail!("--threshold must be finite");
    }
    let model = load_model(&args.checkpoint)?;
    let state = AppState {
        default_threshold: args.threshold,
        ..AppState::new(model)
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        log::info!(
            "serving model {} on http://{}",
            state.model.version,
            listener.local_addr()?
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
