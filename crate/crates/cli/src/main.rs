use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use oapl_core::config::RunConfig;
use oapl_core::experiment;
use tracing_subscriber::EnvFilter;

/// Desk-scale OAPL and GRPO experiments on toy sequence tasks.
///
/// Config arguments take a file path or the name of a shipped preset
/// (`oapl presets` lists them). Relative output dirs resolve against
/// `$OAPL_OUTPUT_ROOT` when it is set.
#[derive(Parser)]
#[command(name = "oapl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, summary.json, checkpoints and plots.
    Run { config: String },
    /// Compare the metrics of two run directories.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Pass@k of a saved checkpoint on the config's task.
    Eval { checkpoint: PathBuf, config: String },
    /// Write the stage-1 rollout dataset for two-stage offline runs.
    GenOffline { config: String },
    /// Validate a config and print it fully resolved.
    Config { config: String },
    /// List the shipped presets.
    Presets,
}

fn load_config(arg: &str) -> anyhow::Result<RunConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(text) = experiment::preset(arg) {
            return RunConfig::parse(text).with_context(|| format!("preset {arg}"));
        }
    }
    RunConfig::load(path).with_context(|| format!("loading {arg}"))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let (dir, summary) = experiment::run_experiment(&cfg)?;
            println!("run dir: {}", dir.display());
            println!("final expected reward: {:.6}", summary.final_expected_reward);
            println!("final entropy: {:.6}", summary.final_entropy);
            for (k, p) in summary
                .final_pass_at_k
                .k_values
                .iter()
                .zip(&summary.final_pass_at_k.mean)
            {
                println!("pass@{k}: {p:.6}");
            }
            if let Some(best) = &summary.best_checkpoint {
                println!("best checkpoint: {} (iteration {})", best.file, best.iteration);
            }
        }
        Command::Compare { dir_a, dir_b, json } => {
            let report = experiment::compare(&dir_a, &dir_b)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let report = experiment::eval_checkpoint(&checkpoint, &cfg)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenOffline { config } => {
            let cfg = load_config(&config)?;
            let (path, groups) = experiment::gen_offline(&cfg)?;
            println!("wrote {groups} groups to {}", path.display());
        }
        Command::Config { config } => {
            print!("{}", load_config(&config)?.to_flat_toml()?);
        }
        Command::Presets => {
            for (name, _) in experiment::PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
