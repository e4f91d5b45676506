//! Argument parsing and dispatch for the `sanet` binary.
//!
//! Precedence for training settings is flags > `--config` file > defaults.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sanet_core::analysis::analyze_model;
use sanet_core::blocks::{Activation, PoolKind};
use sanet_core::checkpoint::load_checkpoint;
use sanet_core::config::{RunConfig, TrainCfg};
use sanet_core::data::{export::export_maps, generate_dataset, Dataset, SynthCfg};
use sanet_core::gradcheck::{report_text, run_suite};
use sanet_core::sanet::ModelCfg;
use sanet_core::trainer::{evaluate, split_indices, train, ModelSegmenter};
use sanet_core::Error;

/// Largest gradient-check error still reported as a pass.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sanet", version, about = "Squeeze-and-attention segmentation at desk scale")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic shapes dataset
    SynthData(SynthArgs),
    /// Train a model and write metrics.log plus best and final checkpoints
    Train(TrainArgs),
    /// Evaluate a checkpoint on the evaluation split of a dataset
    Eval(EvalArgs),
    /// Print parameter and MAC counts of a model at a fixed input size
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Write attention, main-channel and output maps of a trained SANet
    ExportMaps(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Class count including background
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Image side length (multiple of 8)
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Dataset seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model name: <sanet|fcn|fcn-se>-<desk|resnet50|resnet101>
    #[arg(long)]
    pub model: Option<String>,
    /// Class count including background
    #[arg(long)]
    pub classes: Option<usize>,
    /// Attention activation of the SA heads
    #[arg(long, value_parser = ["relu", "sigmoid"])]
    pub sa_activation: Option<String>,
    /// Attention pooling of the SA heads
    #[arg(long, value_parser = ["avg", "max"])]
    pub sa_pool: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides data.dataset)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory (overrides data.out)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the categorical loss
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the dense loss
    #[arg(long)]
    pub beta: Option<f64>,
    /// Seed for initialization, shuffling, flips and dropout
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also write the metric report to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// `key = value` config file supplying model keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input height and width
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [512, 512])]
    pub input_size: Vec<usize>,
    /// Also write the report to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for probe positions and jittered parameters
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write the report to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sample index in the dataset
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output path prefix; files are named <out>_head<i>_...
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a dispatched command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 2, msg: e.to_string() }
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) -> Result<(), Error> {
    if let Some(c) = m.classes {
        cfg.model.classes = c;
    }
    if let Some(name) = &m.model {
        cfg.set_model_name(name)?;
    }
    if let Some(a) = &m.sa_activation {
        cfg.model.sa_activation = a.parse::<Activation>()?;
    }
    if let Some(p) = &m.sa_pool {
        cfg.model.sa_pool = p.parse::<PoolKind>()?;
    }
    Ok(())
}

fn emit(out: &mut dyn Write, report: Option<&Path>, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())?;
    if let Some(p) = report {
        fs::write(p, text).map_err(|e| Failure {
            code: 1,
            msg: format!("cannot write report {}: {e}", p.display()),
        })?;
    }
    Ok(())
}

fn required(v: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    v.ok_or_else(|| Failure {
        code: 1,
        msg: format!("{what} is required (flag or config key)"),
    })
}

/// Runs one parsed command, writing its normal output to `out`.
pub fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::SynthData(a) => {
            let cfg = SynthCfg {
                classes: a.classes,
                image_size: a.size,
                seed: a.seed,
                ..SynthCfg::default()
            };
            generate_dataset(&cfg, a.count, &a.out)?;
            writeln!(out, "wrote {} samples to {}", a.count, a.out.display())?;
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::default();
            if let Some(p) = &a.config {
                cfg.apply_file(p)?;
            }
            apply_model(&mut cfg, &a.model)?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = a.alpha {
                cfg.train.loss.alpha = v;
            }
            if let Some(v) = a.beta {
                cfg.train.loss.beta = v;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if a.dataset.is_some() {
                cfg.dataset = a.dataset;
            }
            if a.out.is_some() {
                cfg.out = a.out;
            }
            cfg.validate()?;
            let dataset = required(cfg.dataset.clone(), "--dataset")?;
            let run_dir = required(cfg.out.clone(), "--out")?;
            let data = Dataset::open(&dataset)?;
            fs::create_dir_all(&run_dir)?;
            fs::write(run_dir.join("config.txt"), cfg.to_text())?;
            let o = train(&cfg.model_cfg(), &data, &cfg.train, Some(&run_dir))?;
            out.write_all(o.log_text().as_bytes())?;
            if let Some((epoch, miou)) = o.best {
                writeln!(out, "best epoch {epoch} miou {miou:.6}")?;
            }
        }
        Command::Eval(a) => {
            let mut ck = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::open(&a.dataset)?;
            let (_, mut idx) = split_indices(data.len(), ck.state.val_split);
            if idx.is_empty() {
                idx = (0..data.len()).collect();
            }
            let batch = TrainCfg::default().batch_for(ck.cfg.backbone);
            let r = evaluate(
                &mut ModelSegmenter {
                    model: &ck.model,
                    store: &mut ck.store,
                },
                &data,
                &idx,
                batch,
            )?;
            emit(out, a.report.as_deref(), &r.to_text())?;
        }
        Command::Analyze(a) => {
            let mut cfg = RunConfig::default();
            cfg.model.classes = 21;
            if let Some(p) = &a.config {
                cfg.apply_file(p)?;
            }
            apply_model(&mut cfg, &a.model)?;
            let mc: ModelCfg = cfg.model_cfg();
            mc.validate()?;
            let stats = analyze_model(&mc, a.input_size[0], a.input_size[1])?;
            emit(out, a.report.as_deref(), &stats.report())?;
        }
        Command::Gradcheck(a) => {
            let reports = run_suite(a.seed)?;
            emit(out, a.report.as_deref(), &report_text(&reports))?;
            if let Some(bad) = reports.iter().find(|r| !(r.max_rel < GRADCHECK_TOL)) {
                return Err(Failure {
                    code: 2,
                    msg: format!("gradient check `{}` failed: max rel error {:.3e}", bad.name, bad.max_rel),
                });
            }
        }
        Command::ExportMaps(a) => {
            let mut ck = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::open(&a.dataset)?;
            if a.index >= data.len() {
                return Err(Failure {
                    code: 1,
                    msg: format!("--index {} out of range for {} samples", a.index, data.len()),
                });
            }
            let b = data.load_batch(&[a.index])?;
            for p in export_maps(&ck.model, &mut ck.store, &b.images, &a.out)? {
                writeln!(out, "{}", p.display())?;
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs it. Returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on internal failures.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}
