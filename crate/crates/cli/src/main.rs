mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

/// Unsupervised optical flow with occlusion handling.
///
/// Exit status: 0 on success, 1 on runtime errors, 2 on configuration
/// errors. `FF_THREADS` sets the worker thread count.
#[derive(Parser, Debug)]
#[command(name = "flowforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Sectioned key = value config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (PNG pairs, .flo ground truth, occlusion PNGs, manifest).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Base seed; sample `i` uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network without supervision.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest of training pairs; generated scenes are used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint (parameters plus optimiser state).
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics log file; records go to stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Total number of steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Stop after this step; a later `--resume` continues the same schedule.
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// off | on | differentiable
        #[arg(long)]
        occlusion: Option<String>,
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Predict flow for one image pair.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        i1: PathBuf,
        #[arg(long)]
        i2: PathBuf,
        /// Output .flo file.
        #[arg(long)]
        out: PathBuf,
        /// Also write a colour-coded flow PNG.
        #[arg(long)]
        viz: Option<PathBuf>,
        /// Also write the occlusion map (from the backward flow) as PNG.
        #[arg(long)]
        occ: Option<PathBuf>,
    },
    /// Score predictions against a ground-truth manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Predict with this checkpoint.
        #[arg(long, conflicts_with = "pred_dir", required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Directory of .flo predictions, matched to the manifest in sorted
        /// order; `<stem>_occ.png` next to a prediction adds occlusion scoring.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        /// One JSON object per line instead of text.
        #[arg(long)]
        json_lines: bool,
    },
    /// Render a .flo file as a colour PNG.
    Viz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Magnitude mapped to full saturation (default: 99th percentile).
        #[arg(long)]
        max_mag: Option<f32>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(#[from] flowforge::FlowError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub fn load_config(args: &ConfigArgs, extra: &[(&str, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("FF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ConfigError::Invalid(format!("FF_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData { cfg, out, count, seed } => {
            let cfg = load_config(&cfg, &[])?;
            commands::gen_data(&cfg, &out, count, seed.unwrap_or(cfg.data_seed))
        }
        Command::Train {
            cfg,
            data,
            out,
            resume,
            log,
            steps,
            until,
            lr,
            seed,
            occlusion,
            radius,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = steps {
                extra.push(("train.steps", v.to_string()));
            }
            if let Some(v) = lr {
                extra.push(("train.learning_rate", v.to_string()));
            }
            if let Some(v) = seed {
                extra.push(("train.seed", v.to_string()));
            }
            if let Some(v) = occlusion {
                extra.push(("train.occlusion", v));
            }
            if let Some(v) = radius {
                extra.push(("train.radius", v.to_string()));
            }
            let cfg = load_config(&cfg, &extra)?;
            commands::train(&cfg, data.as_deref(), &out, resume.as_deref(), log.as_deref(), until)
        }
        Command::Infer {
            cfg,
            checkpoint,
            i1,
            i2,
            out,
            viz,
            occ,
        } => {
            let cfg = load_config(&cfg, &[])?;
            commands::infer(&cfg, &checkpoint, &i1, &i2, &out, viz.as_deref(), occ.as_deref())
        }
        Command::Eval {
            cfg,
            checkpoint,
            pred_dir,
            gt,
            json_lines,
        } => {
            let cfg = load_config(&cfg, &[])?;
            commands::eval(&cfg, checkpoint.as_deref(), pred_dir.as_deref(), &gt, json_lines)
        }
        Command::Viz { flow, out, max_mag } => commands::viz(&flow, &out, max_mag),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
