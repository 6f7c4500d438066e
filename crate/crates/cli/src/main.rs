use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::error;
use lung_detr::dataset::Role;
use lung_detr_cli::config::PipelineConfig;
use lung_detr_cli::pipeline::{
    cmd_build_dataset, cmd_eval, cmd_preprocess, cmd_report, cmd_synth, cmd_train, RunOptions,
    RunSummary,
};

#[derive(Debug, Parser)]
#[command(
    name = "lung-detr",
    version,
    about = "Sparse lung nodule detection pipeline"
)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Redo work even when outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic blob-versus-tube corpus.
    Synth,
    /// Resample, segment, trim and enhance every scan.
    Preprocess,
    /// Project slabs, split by scan and write the manifest.
    BuildDataset,
    /// Train the detector.
    Train,
    /// Evaluate the best checkpoint on a role.
    Eval {
        #[arg(long)]
        role: Option<Role>,
        /// Operating threshold; chosen on the validation role when omitted.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Render PR curves and tables from the last evaluation of a role.
    Report {
        #[arg(long)]
        role: Option<Role>,
    },
    /// Print the effective configuration with every default filled in.
    Config,
}

fn report_failures(summary: &RunSummary) -> ExitCode {
    for (item, reason) in &summary.failures {
        error!("{item}: {reason}");
    }
    if summary.succeeded() {
        ExitCode::SUCCESS
    } else {
        error!("{} item(s) failed", summary.failures.len());
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let opts = RunOptions {
        force: cli.force,
        workers: cfg.workers,
    };
    Ok(match cli.command {
        Command::Synth => report_failures(&cmd_synth(&cfg, opts)?),
        Command::Preprocess => report_failures(&cmd_preprocess(&cfg, opts)?),
        Command::BuildDataset => report_failures(&cmd_build_dataset(&cfg, opts)?),
        Command::Train => report_failures(&cmd_train(&cfg, opts)?.summary),
        Command::Eval { role, threshold } => {
            let run = cmd_eval(&cfg, role.unwrap_or(cfg.eval.role), threshold, opts)?;
            println!(
                "role: {} (threshold {:.4})\n{}",
                run.role, run.threshold, run.report
            );
            ExitCode::SUCCESS
        }
        Command::Report { role } => {
            let role = role.unwrap_or(cfg.eval.role);
            let report = cmd_report(&cfg, role)?;
            println!("role: {role}\n{report}");
            ExitCode::SUCCESS
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            ExitCode::SUCCESS
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
