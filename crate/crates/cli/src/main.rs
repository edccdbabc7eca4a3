use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mfgnet_core::checkpoint::Checkpoint;
use mfgnet_core::config::RunConfig;
use mfgnet_core::environments::ExperimentKind;
use mfgnet_core::run::{export_trajectories, run_training, validate_checkpoint};

/// Neural solver for stochastic mean-field games.
#[derive(Parser)]
#[command(name = "mfgnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a value network and a generator for one experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use the iteration count of the reference runs.
        #[arg(long, conflicts_with = "iterations")]
        paper_scale: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write generated sample paths as CSV.
    ExportTrajectories {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_samples: usize,
        #[arg(long, default_value_t = 16)]
        n_times: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Destination file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a checkpoint of the analytic experiment with the closed-form solution.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the available experiments.
    ListExperiments,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_path(path).with_context(|| format!("loading config {}", path.display()))
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("APAC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("APAC_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            iterations,
            output_dir,
            paper_scale,
            resume,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let out = run_training(&cfg, resume)?;
            let last = out.rows.last();
            println!(
                "trained {} to iteration {} in {}",
                cfg.experiment,
                out.final_iteration,
                out.output_dir.display()
            );
            if let Some(r) = last.and_then(|r| r.monitor_residual) {
                println!("monitor residual {r:.6e}");
            }
        }
        Command::ExportTrajectories {
            checkpoint,
            config,
            n_samples,
            n_times,
            seed,
            output,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let rows = match output {
                Some(path) => export_trajectories(&ck, &cfg, n_samples, n_times, File::create(&path)?)?,
                None => export_trajectories(&ck, &cfg, n_samples, n_times, std::io::stdout().lock())?,
            };
            eprintln!("wrote {rows} rows");
        }
        Command::Validate {
            checkpoint,
            config,
            output_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if cfg.kind() != ExperimentKind::Analytic {
                bail!(
                    "validate only applies to the `analytic` experiment (config names `{}`)",
                    cfg.experiment
                );
            }
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let report = validate_checkpoint(&ck, &cfg)?;
            println!("evaluation points: {}", report.points);
            println!("rel_error_phi: {:.16e}", report.rel_error_phi);
            println!("rel_error_rho: {:.16e}", report.rel_error_rho);
        }
        Command::ListExperiments => {
            let mut out = std::io::stdout().lock();
            for kind in ExperimentKind::ALL {
                writeln!(out, "{:<12} {}", kind.name(), kind.describe())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<mfgnet_core::Error>(), Some(mfgnet_core::Error::Config { .. })));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
