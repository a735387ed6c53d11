//! Pipeline driver: corpus generation, training, evaluation, attribution,
//! complexity benchmarking and report assembly, from one JSON config.

mod commands;
mod config;
mod manifest;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "brainage",
    about = "Stem-and-trunk multiview transformer for brain-age regression on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every section seed (corpus, model, train, bench).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap. Numeric kernels execute on one thread, so any value
    /// reproduces the --threads 1 results bit for bit.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus under <run_dir>/corpus.
    GenData,
    /// Train on the corpus train split; saves the best checkpoint.
    Train,
    /// Evaluate a checkpoint on a split and write metrics/tables/figures.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint directory (default <run_dir>/checkpoints/best).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized (untrained) model instead.
        #[arg(long, default_value_t = false)]
        untrained: bool,
    },
    /// Average input-gradient maps over CN test scans and rank regions.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Wall-clock and analytic-FLOP scaling sweep for stem vs full attention.
    Bench,
    /// Assemble an HTML report from the artifacts in a run directory.
    Report {
        /// Run directory (defaults to the config's run_dir).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    // Report needs only a directory; everything else loads the config.
    if let Command::Report { run_dir: Some(dir) } = &cli.command {
        let outputs = commands::cmd_report(dir)?;
        commands::record_outputs(dir, "report", cli.seed, cli.threads, &outputs, &[])?;
        return Ok(());
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("--config <file> is required"))?;
    let config = config::RunConfig::load(config_path, cli.seed)?;
    let violations = config.violations();
    if !violations.is_empty() {
        let payload = serde_json::json!({
            "error": "invalid configuration",
            "violations": violations,
        });
        eprintln!("{payload}");
        anyhow::bail!("invalid configuration ({} violations)", violations.len());
    }
    std::fs::create_dir_all(&config.run_dir)?;

    match cli.command {
        Command::GenData => {
            commands::cmd_gen_data(&config)?;
            commands::record_outputs(
                &config.run_dir,
                "gen-data",
                cli.seed,
                cli.threads,
                &[],
                &["corpus"],
            )?;
        }
        Command::Train => {
            let outputs = commands::cmd_train(&config)?;
            commands::record_outputs(
                &config.run_dir,
                "train",
                cli.seed,
                cli.threads,
                &outputs,
                &["checkpoints"],
            )?;
        }
        Command::Eval {
            split,
            checkpoint,
            untrained,
        } => {
            let split = commands::parse_split(&split)?;
            let outputs =
                commands::cmd_eval(&config, checkpoint.as_deref(), untrained, split)?;
            commands::record_outputs(
                &config.run_dir,
                "eval",
                cli.seed,
                cli.threads,
                &outputs,
                &[],
            )?;
        }
        Command::Attribute { checkpoint } => {
            let outputs = commands::cmd_attribute(&config, checkpoint.as_deref())?;
            commands::record_outputs(
                &config.run_dir,
                "attribute",
                cli.seed,
                cli.threads,
                &outputs,
                &[],
            )?;
        }
        Command::Bench => {
            let outputs = commands::cmd_bench(&config)?;
            commands::record_outputs(
                &config.run_dir,
                "bench",
                cli.seed,
                cli.threads,
                &outputs,
                &[],
            )?;
        }
        Command::Report { run_dir } => {
            let dir = run_dir.unwrap_or_else(|| config.run_dir.clone());
            let outputs = commands::cmd_report(&dir)?;
            commands::record_outputs(&dir, "report", cli.seed, cli.threads, &outputs, &[])?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Machine-readable error envelope on stderr.
            let payload = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
