//! Run directories: history, checkpoints, config snapshots and exports.
//!
//! A run directory holds
//! `config.resolved.toml`, `history.csv` and `checkpoint.bin`. While a
//! command writes into it, a `.lock` file marks it as taken.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::environments::ExperimentKind;
use crate::error::{Error, Result};
use crate::networks::generate;
use crate::trainer::{
    format_real, stream_rng, streams, train, HistoryRow, MonitorBatch, Schedule, TrainerState, ValidationReport,
    Validator, HISTORY_HEADER,
};
use crate::validation::linspace;

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// What a training command produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<HistoryRow>,
    pub final_iteration: u64,
    pub output_dir: PathBuf,
}

fn keep_history_until(path: &Path, iteration: u64) -> Result<()> {
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .enumerate()
        .filter(|(i, line)| {
            *i == 0
                || line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|it| it <= iteration)
        })
        .map(|(_, l)| l)
        .collect();
    let mut f = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains `cfg` into `cfg.output_dir`.
///
/// With `resume`, an existing checkpoint in the directory is continued up to
/// `cfg.iterations` total iterations; history rows past the checkpoint are
/// dropped first, so the result matches an uninterrupted run.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let env = cfg.environment()?;
    let dir = cfg.output_dir.clone();
    let _lock = OutputLock::acquire(&dir)?;
    std::fs::write(dir.join(SNAPSHOT_FILE), cfg.to_toml())?;

    let history_path = dir.join(HISTORY_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let settings = cfg.train_settings();
    let (mut state, fresh) = if resume && checkpoint_path.exists() {
        let ck = Checkpoint::load(&checkpoint_path)?;
        if ck.dim != cfg.dim {
            return Err(Error::dim("checkpoint dimension", cfg.dim, ck.dim));
        }
        let state = ck.into_state(settings)?;
        keep_history_until(&history_path, state.iteration)?;
        (state, false)
    } else {
        (TrainerState::new(&env, settings), true)
    };

    let mut history = if fresh {
        let mut f = BufWriter::new(File::create(&history_path)?);
        writeln!(f, "{HISTORY_HEADER}")?;
        f
    } else {
        BufWriter::new(OpenOptions::new().append(true).open(&history_path)?)
    };

    let monitor = MonitorBatch::new(&env, cfg.monitor_size, cfg.seed)?;
    let validator = match cfg.analytic_solution()? {
        Some(sol) => Some(Validator::new(sol, &env, cfg.seed)?),
        None => None,
    };
    let schedule = Schedule {
        iterations: cfg.iterations.saturating_sub(state.iteration),
        log_interval: cfg.log_interval,
        validate_interval: cfg.validate_interval,
        initial_row: fresh,
    };
    let rows = train(&mut state, &env, &monitor, validator.as_ref(), schedule, |row, st| {
        writeln!(history, "{}", row.to_csv())?;
        history.flush()?;
        Checkpoint::from_state(st).save(&checkpoint_path)
    })?;
    if rows.is_empty() {
        Checkpoint::from_state(&state).save(&checkpoint_path)?;
    }
    Ok(TrainOutcome {
        rows,
        final_iteration: state.iteration,
        output_dir: dir,
    })
}

/// Pushes `n_samples` initial draws through the generator at `n_times`
/// uniform times and writes `sample_id,t,x_1,...,x_d` rows, time-major.
pub fn export_trajectories<W: Write>(
    ck: &Checkpoint,
    cfg: &RunConfig,
    n_samples: usize,
    n_times: usize,
    out: W,
) -> Result<usize> {
    if ck.dim != cfg.dim {
        return Err(Error::dim("checkpoint dimension", cfg.dim, ck.dim));
    }
    if n_samples == 0 || n_times == 0 {
        return Err(Error::InvalidArgument("n_samples and n_times must be at least 1".into()));
    }
    let env = cfg.environment()?;
    let mut rng = stream_rng(streams::seed(cfg.seed, streams::EXPORT), streams::EXPORT);
    let z = env.rho0.sample(n_samples, &mut rng);
    let times = if n_times == 1 {
        vec![0.0]
    } else {
        linspace(0.0, env.horizon, n_times)
    };
    let mut w = BufWriter::new(out);
    let coords: Vec<String> = (1..=cfg.dim).map(|i| format!("x_{i}")).collect();
    writeln!(w, "sample_id,t,{}", coords.join(","))?;
    let mut rows = 0;
    for &t in &times {
        let tv = Array1::from_elem(n_samples, t);
        let x = generate(&ck.generator, env.horizon, z.view(), tv.view())?;
        for j in 0..n_samples {
            let mut line = format!("{j},{}", format_real(Some(t)));
            for v in x.column(j) {
                line.push(',');
                line.push_str(&format_real(Some(*v)));
            }
            writeln!(w, "{line}")?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Scores a checkpoint against the closed-form solution and appends the
/// result to the run's history.
pub fn validate_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<ValidationReport> {
    if cfg.kind() != ExperimentKind::Analytic {
        return Err(Error::InvalidArgument(format!(
            "validation needs the closed-form solution of the `analytic` experiment; `{}` has none",
            cfg.experiment
        )));
    }
    if ck.dim != cfg.dim {
        return Err(Error::dim("checkpoint dimension", cfg.dim, ck.dim));
    }
    let env = cfg.environment()?;
    let sol = cfg.analytic_solution()?.expect("analytic experiment");
    let validator = Validator::new(sol, &env, cfg.seed)?;
    let report = ValidationReport {
        rel_error_phi: validator.phi_error(&ck.value, &env)?,
        rel_error_rho: validator.rho_error(&ck.generator, &env)?,
        points: validator.points.len(),
    };
    let dir = &cfg.output_dir;
    let _lock = OutputLock::acquire(dir)?;
    let path = dir.join(HISTORY_FILE);
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if new {
        writeln!(f, "{HISTORY_HEADER}")?;
    }
    let row = HistoryRow {
        iter: ck.iteration,
        rel_error_phi: Some(report.rel_error_phi),
        rel_error_rho: Some(report.rel_error_rho),
        ..Default::default()
    };
    writeln!(f, "{}", row.to_csv())?;
    Ok(report)
}
