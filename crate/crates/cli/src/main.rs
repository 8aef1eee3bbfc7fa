//! `r2r`: train, evaluate, and explain region-to-region prototype attention
//! classifiers, plus a gradient verification command.
//!
//! Every failure prints a single machine-parsable `error: ...` line to
//! stderr and exits non-zero (2 for configuration/data problems, 1 for
//! numeric failures).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::StageSelector;
use config::{RunConfig, SyntheticSpec};
use r2r_core::metrics::ActivityMeasure;
use r2r_core::Error;

#[derive(Parser)]
#[command(name = "r2r", version, about = "Region-to-region prototype attention classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// CSV manifest (header: image,<class>,...) over PGM files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Generate N synthetic samples instead of reading a manifest.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Synthetic image edge length.
    #[arg(long, value_name = "PX")]
    size: Option<usize>,
    /// Seed of the synthetic generator (defaults to the run seed).
    #[arg(long)]
    synthetic_seed: Option<u64>,
}

impl DataArgs {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(path) = &self.manifest {
            config.data.manifest = Some(path.clone());
            config.data.synthetic = None;
        }
        if self.synthetic.is_some() || self.size.is_some() || self.synthetic_seed.is_some() {
            let mut spec = config.data.synthetic.clone().unwrap_or(SyntheticSpec {
                size: config.model.input_size,
                seed: config.seed,
                ..SyntheticSpec::default()
            });
            if let Some(n) = self.synthetic {
                spec.n = n;
            }
            if let Some(size) = self.size {
                spec.size = size;
            }
            if let Some(seed) = self.synthetic_seed {
                spec.seed = seed;
            }
            config.data.synthetic = Some(spec);
            if self.synthetic.is_some() {
                config.data.manifest = None;
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, report, and effective config.
    Train {
        /// JSON run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        /// Master seed (model init + shuffling + default synthetic seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Parent directory for run outputs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-class AUC, mean AUC, localization.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Metrics JSON output path (default: metrics.json next to the
        /// checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export mask heatmaps and overlays for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PGM, model input size).
        #[arg(long)]
        image: PathBuf,
        /// Stage to visualize: an index, `last`, or `all`.
        #[arg(long, default_value = "last")]
        stage: StageSelector,
        /// How many masks per block, ranked by activity.
        #[arg(long, default_value_t = 3)]
        topk: usize,
        /// Activity measure: total mass or peak value of the weighted mask.
        #[arg(long, default_value = "mass")]
        activity: String,
        #[arg(long, default_value = "explanations")]
        out_dir: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one adjoint on purpose (exercises the failure path).
        #[arg(long, default_value_t = false)]
        break_adjoint: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 1,
        _ => 2,
    }
}

fn run() -> Result<i32, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            data,
            epochs,
            batch_size,
            val_fraction,
            seed,
            out_dir,
        } => {
            let mut run_config = config::load_run_config(config.as_deref())?;
            if let Some(seed) = seed {
                run_config.seed = seed;
            }
            data.apply(&mut run_config);
            if let Some(epochs) = epochs {
                run_config.training.epochs = epochs;
            }
            if let Some(batch_size) = batch_size {
                run_config.training.batch_size = batch_size;
            }
            if let Some(val_fraction) = val_fraction {
                run_config.training.val_fraction = val_fraction;
            }
            if let Some(out_dir) = out_dir {
                run_config.output_dir = out_dir;
            }
            commands::cmd_train(run_config)?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let mut run_config = RunConfig::default();
            run_config.data.synthetic = None;
            data.apply(&mut run_config);
            commands::cmd_eval(&checkpoint, run_config, out.as_deref())?;
            Ok(0)
        }
        Command::Explain {
            checkpoint,
            image,
            stage,
            topk,
            activity,
            out_dir,
        } => {
            let activity = match activity.as_str() {
                "mass" => ActivityMeasure::Mass,
                "argmax" => ActivityMeasure::ArgmaxPeak,
                other => {
                    return Err(Error::Config(format!(
                        "--activity must be `mass` or `argmax`, got {other:?}"
                    )))
                }
            };
            commands::cmd_explain(&checkpoint, &image, &stage, topk, activity, &out_dir)?;
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            break_adjoint,
        } => commands::cmd_gradcheck(seed, break_adjoint),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
