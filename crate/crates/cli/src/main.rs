use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crtlab_cli::config::{default_config, load_config, ExperimentConfig, ExperimentKind};
use crtlab_cli::plot::emit_phase_diagram;
use crtlab_cli::runner::{emit_summary_plots, read_summary, run_experiment, run_theory_check};

#[derive(Parser)]
#[command(name = "crtlab", version, about = "Recursive training on contaminated data: simulations and rate checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contaminated recursive training with the ECDF or KDE estimator.
    Crt(RunArgs),
    /// Biased contaminated recursive training.
    Bcrt(RunArgs),
    /// Contaminated recursive training with the neural generator.
    Wgan(RunArgs),
    /// Numeric checks of the rate theory; prints a JSON report.
    TheoryCheck(RunArgs),
    /// Redraws the figures of a finished run from its summary.
    Plot(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replicates per cell (overrides the config).
    #[arg(long)]
    replicates: Option<usize>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn resolve(args: &RunArgs, fallback: ExperimentKind, accepted: &[ExperimentKind]) -> Result<ExperimentConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => load_config(path, None).or_else(|e| {
            if e.key.as_deref() == Some("kind") && e.message == "missing required key" {
                load_config(path, Some(fallback))
            } else {
                Err(e)
            }
        }),
        None => Ok(default_config(fallback)),
    }
    .map_err(|e| Failure::Config(e.to_string()))?;
    if !accepted.contains(&config.kind) {
        return Err(Failure::Config(format!("config key `kind`: `{}` cannot run under this command", config.kind)));
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(r) = args.replicates {
        if r == 0 {
            return Err(Failure::Config("--replicates must be >= 1".into()));
        }
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.base_seed = s;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    use ExperimentKind::*;
    let rt = |e: anyhow::Error| Failure::Runtime(format!("{e:#}"));
    let (args, fallback, accepted): (&RunArgs, _, &[ExperimentKind]) = match &cli.command {
        Command::Crt(a) => (a, CrtEcdf, &[CrtEcdf, CrtKde]),
        Command::Bcrt(a) => (a, BcrtEcdf, &[BcrtEcdf, BcrtKde]),
        Command::Wgan(a) => (a, CrtNeural, &[CrtNeural]),
        Command::TheoryCheck(a) => (a, TheoryCheck, &[TheoryCheck]),
        Command::Plot(a) => (a, CrtEcdf, &[CrtEcdf, CrtKde, CrtNeural, BcrtEcdf, BcrtKde]),
    };
    let config = resolve(args, fallback, accepted)?;
    match cli.command {
        Command::TheoryCheck(_) => {
            let (report, manifest) = run_theory_check(&config).map_err(rt)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if manifest.failed() {
                return Err(Failure::Runtime("theory checks failed".into()));
            }
        }
        Command::Plot(_) => {
            let summary = read_summary(&config.output_dir).map_err(rt)?;
            let files = emit_summary_plots(&config, &summary, &config.output_dir).map_err(rt)?;
            if summary.is_empty() {
                let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
                emit_phase_diagram(&grid, &grid, &config.output_dir.join("plots/phase_diagram.svg")).map_err(rt)?;
            }
            for f in files {
                println!("{}", config.output_dir.join(f).display());
            }
        }
        _ => {
            let manifest = run_experiment(&config).map_err(rt)?;
            println!("{}", config.output_dir.join("summary.json").display());
            let failed: Vec<&str> = manifest.cells.iter().filter(|c| !c.ok).map(|c| c.cell.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("failed cells: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
