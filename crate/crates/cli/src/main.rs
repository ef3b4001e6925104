use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use mocolab::FinetuneMode;
use mocolab_cli::{
    cmd_epoch_sweep, cmd_evaluate, cmd_experiment, cmd_finetune, cmd_plot, cmd_pretrain, cmd_similarity,
    cmd_synth_data, ConfigError, ExperimentConfig, FinetuneArgs, FinetuneSource, RunOptions,
};

/// Momentum-contrast pretraining and transfer experiments on small image sets.
#[derive(Debug, Parser)]
#[command(name = "mocolab", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Reuse completed cells and cached checkpoints.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic datasets as image folders.
    SynthData,
    /// Build the baseline and every pretraining checkpoint.
    Pretrain,
    /// Finetune one initialization on one label subset.
    Finetune {
        /// Configured initialization name.
        #[arg(long, conflicts_with = "checkpoint")]
        init: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "linear")]
        mode: FinetuneMode,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Weighted AUROC with a bootstrap interval for a predictions CSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Pairwise dataset similarity by layer.
    Similarity,
    /// End-to-end finetuning over an epoch grid.
    EpochSweep,
    /// Full transfer matrix: inits x modes x fractions x replicates.
    Experiment,
    /// Re-render figures from the tables under --out.
    Plot,
}

fn parse_mode(s: &str) -> Result<FinetuneMode, String> {
    match s {
        "linear" => Ok(FinetuneMode::Linear),
        "end_to_end" | "end-to-end" => Ok(FinetuneMode::EndToEnd),
        _ => Err(format!("unknown mode `{s}` (expected linear or end_to_end)")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else {
        bail!(ConfigError("--config is required for this command".into()));
    };
    let mut config = ExperimentConfig::load(path).map_err(|e| ConfigError(format!("{}: {e:#}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<bool> {
    let opts = RunOptions {
        out: cli.out.clone(),
        jobs: cli.jobs,
        resume: cli.resume,
    };
    match &cli.command {
        Command::SynthData => {
            for dir in cmd_synth_data(&load_config(cli)?, &opts)? {
                println!("{}", dir.display());
            }
        }
        Command::Pretrain => {
            for ckpt in cmd_pretrain(&load_config(cli)?, &opts)? {
                println!("{}", ckpt.display());
            }
        }
        Command::Finetune {
            init,
            checkpoint,
            mode,
            fraction,
            replicate,
        } => {
            let source = match (init, checkpoint) {
                (_, Some(p)) => FinetuneSource::Checkpoint(p.clone()),
                (Some(i), None) => FinetuneSource::Init(i.clone()),
                (None, None) => bail!(ConfigError("finetune needs --init or --checkpoint".into())),
            };
            let args = FinetuneArgs {
                source,
                mode: *mode,
                fraction: *fraction,
                replicate: *replicate,
            };
            println!("{}", cmd_finetune(&load_config(cli)?, &opts, &args)?.display());
        }
        Command::Evaluate { predictions } => {
            let config = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            cmd_evaluate(config.as_ref(), &opts, predictions, cli.seed.unwrap_or(0))?;
        }
        Command::Similarity => {
            let report = cmd_similarity(&load_config(cli)?, &opts)?;
            for e in report.entries.iter().filter(|e| e.a != e.b) {
                println!("{} {} / {}: {:.4}", e.layer, e.a, e.b, e.score);
            }
        }
        Command::EpochSweep => {
            for r in cmd_epoch_sweep(&load_config(cli)?, &opts)? {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{} {} epochs: val {} test {}",
                    r.init,
                    r.epochs,
                    fmt(r.final_val),
                    fmt(r.test)
                );
            }
        }
        Command::Experiment => {
            let outcome = cmd_experiment(&load_config(cli)?, &opts)?;
            for f in &outcome.failures {
                eprintln!("cell failed: {f:?}");
            }
            println!(
                "{} cells, {} failed",
                outcome.records.len() + outcome.failures.len(),
                outcome.failures.len()
            );
            return Ok(outcome.failures.is_empty());
        }
        Command::Plot => {
            for p in cmd_plot(&cli.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
