//! Command line front end for the attention-constrained anomaly localizer.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use camloc_core::data::Split;
use clap::{Args, Parser, Subcommand};

use commands::{AblateFlags, AblationAxis, EvalFlags, TrainFlags};

#[derive(Parser)]
#[command(
    name = "camloc",
    version,
    about = "Unsupervised anomaly localization with size-constrained attention maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config. Relative paths resolve
    /// against $CAMLOC_OUT_ROOT when that variable is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs instead of refusing.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and export it as PNG files plus a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dataset seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per repetition and write checkpoints and step logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Base training seed, overriding the config. Repetition r uses seed + r.
        #[arg(long)]
        seed: Option<u64>,
        /// Constraint kind override: barrier, l2_image, l2_pixel, l1_expansion or none.
        #[arg(long)]
        constraint: Option<String>,
        /// Continue from an existing checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained checkpoint and write one report per threshold regime.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate. Defaults to rep0/model.ckpt under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest, overriding the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Threshold regime, repeatable: fixed:<tau>, op or percentile:<q>.
        #[arg(long = "regime")]
        regimes: Vec<String>,
        /// Scoring method override: attention, inverted_attention or residual.
        #[arg(long)]
        method: Option<String>,
        /// Number of qualitative panels to render.
        #[arg(long)]
        panels: Option<usize>,
        /// Dataset split to score: val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sweep one hyperparameter axis, training and scoring every grid cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis to sweep: p, t, lambda, cam_depth, constraint_kind, recon_loss or latent_dim.
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated grid values, overriding the default grid.
        #[arg(long)]
        values: Option<String>,
    },
    /// Average several evaluation reports into one.
    Report {
        /// Report JSON files to average.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output path for the averaged report.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
}

fn parse_split(s: &str) -> camloc_core::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(camloc_core::CoreError::Config(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}

fn run(cli: Cli) -> camloc_core::Result<()> {
    match cli.command {
        Command::Synth { common, seed } => {
            commands::cmd_synth(&common.config, common.out.as_deref(), seed, common.force)
        }
        Command::Train {
            common,
            seed,
            constraint,
            resume,
        } => commands::cmd_train(
            &common.config,
            TrainFlags {
                out: common.out.as_deref(),
                seed,
                force: common.force,
                constraint: constraint.as_deref(),
                resume: resume.as_deref(),
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            regimes,
            method,
            panels,
            split,
        } => commands::cmd_eval(
            &common.config,
            EvalFlags {
                out: common.out.as_deref(),
                force: common.force,
                checkpoint: checkpoint.as_deref(),
                dataset: dataset.as_deref(),
                regimes: &regimes,
                method: method.as_deref(),
                panels,
                split: parse_split(&split)?,
            },
        ),
        Command::Ablate {
            common,
            axis,
            values,
        } => commands::cmd_ablate(
            &common.config,
            AblateFlags {
                out: common.out.as_deref(),
                force: common.force,
                axis,
                values: values.as_deref(),
            },
        ),
        Command::Report { inputs, out, force } => commands::cmd_report(&inputs, &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("camloc: {e}");
            ExitCode::FAILURE
        }
    }
}
