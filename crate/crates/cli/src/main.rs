//! `sgg`: synthetic scene graph pipeline driver.
//!
//! Subcommands: `gen`, `train`, `eval`, `ablate`, `attn`. Configuration
//! merges defaults, an optional `--config key=value` file, and `--set`
//! overrides, in that order. Exit codes: 0 ok, 1 usage, 2 data/validation,
//! 3 internal.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use sgg_core::error::Error;

#[derive(Parser)]
#[command(name = "sgg", version, about = "Scene graph generation at desk scale")]
struct Cli {
    /// key = value configuration file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every seed (generator, training, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for run artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits and a manifest.
    Gen,
    /// Train a model on the generated splits; writes checkpoint and log.
    Train,
    /// Evaluate a checkpoint (or the frequency baseline) and write metrics.
    Eval {
        /// Checkpoint path (defaults to <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score with the frequency-only baseline; no checkpoint needed.
        #[arg(long)]
        freq_baseline: bool,
        /// Pipeline mode: predcls | sgcls | sgdet.
        #[arg(long)]
        mode: Option<String>,
        /// Graph constraint: with | without | both.
        #[arg(long, default_value = "both")]
        constraint: String,
        /// Comma-separated K list, e.g. 20,50,100.
        #[arg(long)]
        k: Option<String>,
        /// Split to evaluate: train | val | test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate a list of flag variants on shared data.
    Ablate {
        /// Comma-separated preset names (e.g. rtn,node-pe,vaswani-decoder).
        #[arg(long)]
        variants: Option<String>,
        /// Sweep file: one `name flag=value ...` line per variant.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Dump per-layer/head attention matrices for one scene.
    Attn {
        /// Checkpoint path (defaults to <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene identifier within the evaluation split.
        #[arg(long)]
        scene: String,
        /// Split to search: train | val | test.
        #[arg(long)]
        split: Option<String>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => 3,
        Error::Dim { .. } | Error::Index { .. } => 3,
        _ => 2,
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = build_config(cli)?;
    match &cli.command {
        Command::Gen => commands::cmd_gen(&cfg, &cli.out),
        Command::Train => commands::cmd_train(&cfg, &cli.out),
        Command::Eval {
            checkpoint,
            freq_baseline,
            mode,
            constraint,
            k,
            split,
        } => {
            if let Some(mode) = mode {
                cfg.set("eval.mode", mode)?;
            }
            if let Some(k) = k {
                cfg.set("eval.k", k)?;
            }
            if let Some(split) = split {
                cfg.set("eval.split", split)?;
            }
            let args = commands::EvalArgs {
                checkpoint: checkpoint.clone(),
                freq_baseline: *freq_baseline,
                constraint: constraint.clone(),
            };
            commands::cmd_eval(&cfg, &cli.out, &args)
        }
        Command::Ablate { variants, sweep } => {
            commands::cmd_ablate(&cfg, &cli.out, variants.as_deref(), sweep.as_deref())
        }
        Command::Attn {
            checkpoint,
            scene,
            split,
        } => {
            if let Some(split) = split {
                cfg.set("eval.split", split)?;
            }
            commands::cmd_attn(&cfg, &cli.out, checkpoint.as_deref(), scene)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are not usage errors
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
