//! Command-line entry point: dataset generation, training, adaptation,
//! evaluation, flight simulation, and the λ sweep. Exit code 0 on success;
//! failures print a one-line diagnostic and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trailnet::config::ExperimentConfig;
use trailnet::harness;

#[derive(Parser)]
#[command(
    name = "trailnet",
    about = "Trail-following domain adaptation experiments on procedural forest worlds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config file (key = value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Restrict the run to a single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate FTDS datasets for every configured domain and seed.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train source-only baselines (λ = 0).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt baselines to the target domain and report both accuracies.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint to resume from (default: the one `train`
        /// wrote into --out for this seed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target test set or an FTDS file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Explicit FTDS dataset path instead of the generated test set.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run closed-loop episodes on target-domain worlds.
    Fly {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the perfect-knowledge geometry autopilot instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Label used in output file names and the summary row.
        #[arg(long)]
        label: Option<String>,
    },
    /// One adaptation run per (λ, seed) over the configured grid.
    SweepLambda {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, String> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let fail = |e: harness::HarnessError| e.to_string();
    match cli.cmd {
        Cmd::Gen { common } => {
            let cfg = load_config(&common.config)?;
            harness::cmd_gen(&cfg, &common.out).map_err(fail)?;
            println!("datasets written to {}", common.out.display());
        }
        Cmd::Train { common } => {
            let cfg = load_config(&common.config)?;
            harness::cmd_train(&cfg, &common.out, common.seed).map_err(fail)?;
            println!("baselines written to {}", common.out.display());
        }
        Cmd::Adapt { common, checkpoint } => {
            let cfg = load_config(&common.config)?;
            let rows =
                harness::cmd_adapt(&cfg, &common.out, common.seed, checkpoint.as_deref())
                    .map_err(fail)?;
            for r in &rows {
                println!(
                    "seed {}: baseline {:.4} -> adapted {:.4} (target {})",
                    r.seed, r.baseline_accuracy, r.adapted_accuracy, r.target
                );
            }
        }
        Cmd::Eval { common, checkpoint, dataset } => {
            let cfg = load_config(&common.config)?;
            let acc = harness::cmd_eval(&cfg, &common.out, &checkpoint, dataset.as_deref(), common.seed)
                .map_err(fail)?;
            println!("accuracy {acc:.4}");
        }
        Cmd::Fly { common, checkpoint, oracle, label } => {
            let cfg = load_config(&common.config)?;
            let summary = harness::cmd_fly(
                &cfg,
                &common.out,
                checkpoint.as_deref(),
                oracle,
                label.as_deref(),
                common.seed,
            )
            .map_err(fail)?;
            println!(
                "{}: mean {:.1} m, median {:.1} m, {}/{} failures",
                summary.label,
                summary.mean_distance,
                summary.median_distance,
                summary.failures,
                summary.worlds
            );
        }
        Cmd::SweepLambda { common } => {
            let cfg = load_config(&common.config)?;
            let points = harness::cmd_sweep_lambda(&cfg, &common.out, common.seed).map_err(fail)?;
            for lambda in &cfg.lambda_grid {
                let accs: Vec<f64> = points
                    .iter()
                    .filter(|p| p.lambda == *lambda)
                    .map(|p| p.accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("lambda {lambda}: mean accuracy {mean:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
