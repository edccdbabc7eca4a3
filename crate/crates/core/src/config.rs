//! Run configuration: a flat TOML file resolved against per-experiment defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environments::{
    quad, Congestion, EntropyInteraction, Environment, ExperimentKind, Hamiltonian, InitialDensity,
    Interaction, ObstacleKind, QuadcopterVariant, TerminalCost,
};
use crate::error::{Error, Result};
use crate::trainer::TrainSettings;
use crate::validation::AnalyticSolution;

/// Iterations used when the file does not set `iterations`.
pub const DESK_ITERATIONS: u64 = 10_000;

/// Keys as they appear in the file; everything except `experiment`, `dim`
/// and `nu` may be omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<String>,
    dim: Option<i64>,
    nu: Option<f64>,
    gamma: Option<f64>,
    beta: Option<f64>,
    speed_c: Option<f64>,
    gamma_obst: Option<f64>,
    gamma_cong: Option<f64>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    batch_size: Option<i64>,
    iterations: Option<i64>,
    lr_phi: Option<f64>,
    lr_gen: Option<f64>,
    betas: Option<Vec<f64>>,
    weight_decay: Option<f64>,
    lambda_hjb: Option<f64>,
    smoothing_eps: Option<f64>,
    seed: Option<i64>,
    log_interval: Option<i64>,
    validate_interval: Option<i64>,
    output_dir: Option<PathBuf>,
    hamiltonian_variant: Option<String>,
    mass: Option<f64>,
    gravity: Option<f64>,
    width: Option<i64>,
    hidden_layers: Option<i64>,
    monitor_size: Option<i64>,
}

/// A fully resolved configuration. Serializing it yields a file that loads
/// back to the same value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: String,
    pub dim: usize,
    pub nu: f64,
    pub gamma: f64,
    pub beta: f64,
    pub speed_c: f64,
    pub gamma_obst: f64,
    pub gamma_cong: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_phi: f64,
    pub lr_gen: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub lambda_hjb: f64,
    pub smoothing_eps: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub validate_interval: u64,
    pub output_dir: PathBuf,
    pub hamiltonian_variant: String,
    pub mass: f64,
    pub gravity: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub monitor_size: usize,
}

fn require<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(key, "missing required key"))
}

fn count(v: i64, key: &str, min: i64) -> Result<u64> {
    if v < min {
        return Err(Error::config(key, format!("must be an integer >= {min}, got {v}")));
    }
    Ok(v as u64)
}

fn finite(v: f64, key: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(key, "must be finite"))
    }
}

fn positive(v: f64, key: &str) -> Result<f64> {
    if finite(v, key)? > 0.0 {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be > 0, got {v}")))
    }
}

fn non_negative(v: f64, key: &str) -> Result<f64> {
    if finite(v, key)? >= 0.0 {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be >= 0, got {v}")))
    }
}

/// Iteration counts of the reference runs.
pub fn paper_iterations(kind: ExperimentKind, dim: usize, nu: f64, gamma: f64) -> u64 {
    let low = dim <= 2;
    match kind {
        ExperimentKind::NuSweep => 200_000,
        ExperimentKind::Obstacle => {
            if low {
                200_000
            } else {
                300_000
            }
        }
        ExperimentKind::Congestion => {
            if low {
                100_000
            } else {
                500_000
            }
        }
        ExperimentKind::Bottleneck => match (low, nu >= 0.4) {
            (true, false) => 100_000,
            (false, false) => 500_000,
            (true, true) => 150_000,
            (false, true) => 800_000,
        },
        ExperimentKind::Symmetric => match (low, nu > 0.0) {
            (true, false) => 100_000,
            (true, true) => 300_000,
            (false, false) => 500_000,
            (false, true) if dim < 100 => 1_000_000,
            (false, true) => 2_000_000,
        },
        ExperimentKind::Analytic => {
            if gamma == 0.0 {
                30_000
            } else {
                60_000
            }
        }
        ExperimentKind::Quadcopter => 100_000,
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<file>")
                .to_string();
            Error::Config { key, message: msg }
        })?;
        Self::resolve(raw)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let name = require(raw.experiment, "experiment")?;
        let kind = ExperimentKind::parse(&name).ok_or_else(|| {
            let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
            Error::config("experiment", format!("unknown experiment `{name}`; expected one of {}", names.join(", ")))
        })?;
        let dim = count(require(raw.dim, "dim")?, "dim", 1)? as usize;
        let nu = non_negative(require(raw.nu, "nu")?, "nu")?;
        match kind {
            ExperimentKind::Quadcopter if dim != quad::STATE_DIM => {
                return Err(Error::config("dim", format!("quadcopter state has dimension 12, got {dim}")));
            }
            ExperimentKind::Analytic if nu == 0.0 => {
                return Err(Error::config("nu", "analytic experiment needs nu > 0"));
            }
            ExperimentKind::Analytic | ExperimentKind::Quadcopter => {}
            _ if dim < 2 => return Err(Error::config("dim", "this experiment needs dim >= 2")),
            _ => {}
        }

        let gamma = non_negative(raw.gamma.unwrap_or(0.0), "gamma")?;
        let beta = positive(raw.beta.unwrap_or(1.0), "beta")?;
        let speed_c = positive(
            raw.speed_c.unwrap_or(match kind {
                ExperimentKind::Congestion | ExperimentKind::Bottleneck => 5.0,
                _ => 8.0,
            }),
            "speed_c",
        )?;
        let gamma_obst = non_negative(
            raw.gamma_obst.unwrap_or(match kind {
                ExperimentKind::Symmetric => 20.0,
                _ => 5.0,
            }),
            "gamma_obst",
        )?;
        let gamma_cong = non_negative(
            raw.gamma_cong.unwrap_or(match kind {
                ExperimentKind::Quadcopter => 20.0,
                _ => 1.0,
            }),
            "gamma_cong",
        )?;
        let horizon = positive(
            raw.horizon.unwrap_or(if kind == ExperimentKind::Quadcopter { 4.0 } else { 1.0 }),
            "T",
        )?;
        let batch_size = count(
            raw.batch_size
                .unwrap_or(if kind == ExperimentKind::Quadcopter { 150 } else { 50 }),
            "batch_size",
            1,
        )? as usize;
        let iterations = count(raw.iterations.unwrap_or(DESK_ITERATIONS as i64), "iterations", 0)?;
        let lr_phi = positive(raw.lr_phi.unwrap_or(4e-4), "lr_phi")?;
        let lr_gen = positive(raw.lr_gen.unwrap_or(1e-4), "lr_gen")?;
        let betas = match raw.betas.as_deref() {
            None => [0.5, 0.9],
            Some(&[b1, b2]) if (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) => [b1, b2],
            Some(_) => return Err(Error::config("betas", "expected two numbers in [0, 1)")),
        };
        let weight_decay = non_negative(raw.weight_decay.unwrap_or(1e-4), "weight_decay")?;
        let lambda_hjb = non_negative(
            raw.lambda_hjb
                .unwrap_or(if kind == ExperimentKind::Symmetric { 0.1 } else { 1.0 }),
            "lambda_hjb",
        )?;
        let smoothing_eps = positive(raw.smoothing_eps.unwrap_or(1e-3), "smoothing_eps")?;
        let seed = count(raw.seed.unwrap_or(0), "seed", 0)?;
        let log_interval = count(raw.log_interval.unwrap_or(100), "log_interval", 1)?;
        let validate_interval = count(raw.validate_interval.unwrap_or(1000), "validate_interval", 1)?;
        let output_dir = raw
            .output_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
        let hamiltonian_variant = raw.hamiltonian_variant.unwrap_or_else(|| "derived".into());
        if !matches!(hamiltonian_variant.as_str(), "derived" | "paper") {
            return Err(Error::config(
                "hamiltonian_variant",
                format!("expected `derived` or `paper`, got `{hamiltonian_variant}`"),
            ));
        }
        let mass = positive(raw.mass.unwrap_or(0.5), "mass")?;
        let gravity = finite(raw.gravity.unwrap_or(9.81), "gravity")?;
        let width = count(raw.width.unwrap_or(100), "width", 1)? as usize;
        let hidden_layers = count(raw.hidden_layers.unwrap_or(3), "hidden_layers", 1)? as usize;
        let monitor_size = count(raw.monitor_size.unwrap_or(4096), "monitor_size", 1)? as usize;

        let cfg = RunConfig {
            experiment: kind.name().to_string(),
            dim,
            nu,
            gamma,
            beta,
            speed_c,
            gamma_obst,
            gamma_cong,
            horizon,
            batch_size,
            iterations,
            lr_phi,
            lr_gen,
            betas,
            weight_decay,
            lambda_hjb,
            smoothing_eps,
            seed,
            log_interval,
            validate_interval,
            output_dir,
            hamiltonian_variant,
            mass,
            gravity,
            width,
            hidden_layers,
            monitor_size,
        };
        cfg.environment()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> ExperimentKind {
        ExperimentKind::parse(&self.experiment).expect("validated on load")
    }

    /// Replaces `iterations` with the reference-run count.
    pub fn paper_scale(mut self) -> Self {
        self.iterations = paper_iterations(self.kind(), self.dim, self.nu, self.gamma);
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    /// The closed-form solution for the analytic experiment.
    pub fn analytic_solution(&self) -> Result<Option<AnalyticSolution>> {
        if self.kind() != ExperimentKind::Analytic {
            return Ok(None);
        }
        AnalyticSolution::new(self.gamma, self.nu, self.beta, self.dim).map(Some)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            lambda: self.lambda_hjb,
            lr_phi: self.lr_phi,
            lr_gen: self.lr_gen,
            betas: (self.betas[0], self.betas[1]),
            weight_decay: self.weight_decay,
            width: self.width,
            hidden_layers: self.hidden_layers,
            skip_weight: 0.5,
            monitor_size: self.monitor_size,
            seed: self.seed,
        }
    }

    pub fn environment(&self) -> Result<Environment> {
        let kind = self.kind();
        let d = self.dim;
        let eps = self.smoothing_eps;
        let norm = Hamiltonian::Norm {
            c: self.speed_c,
            eps,
        };
        let planar = |target: [f64; 2]| TerminalCost::Distance {
            coords: vec![0, 1],
            target: target.to_vec(),
            eps,
        };
        let std = 0.1f64.sqrt();
        let corner = {
            let mut c = vec![0.0; d];
            c[0] = -2.0;
            c[1] = -2.0;
            c
        };
        let inverse_square = Some(Congestion::InverseSquare {
            weight: self.gamma_cong,
        });
        let env = match kind {
            ExperimentKind::NuSweep | ExperimentKind::Obstacle | ExperimentKind::Symmetric => {
                let obstacle = match kind {
                    ExperimentKind::Obstacle => Some((ObstacleKind::Twin, self.gamma_obst)),
                    ExperimentKind::Symmetric => Some((ObstacleKind::Symmetric, self.gamma_obst)),
                    _ => None,
                };
                Environment {
                    kind,
                    dim: d,
                    nu: self.nu,
                    horizon: self.horizon,
                    hamiltonian: norm,
                    interaction: Interaction {
                        obstacle,
                        ..Default::default()
                    },
                    terminal: planar([2.0, 2.0]),
                    rho0: InitialDensity::isotropic(corner, std),
                }
            }
            ExperimentKind::Congestion | ExperimentKind::Bottleneck => {
                let mut center = vec![-2.0; d];
                center[1] = 0.0;
                Environment {
                    kind,
                    dim: d,
                    nu: self.nu,
                    horizon: self.horizon,
                    hamiltonian: norm,
                    interaction: Interaction {
                        obstacle: (kind == ExperimentKind::Bottleneck)
                            .then_some((ObstacleKind::Bottleneck, self.gamma_obst)),
                        congestion: inverse_square,
                        entropy: None,
                    },
                    terminal: planar([2.0, 0.0]),
                    rho0: InitialDensity::isotropic(center, std),
                }
            }
            ExperimentKind::Analytic => {
                let sol = AnalyticSolution::new(self.gamma, self.nu, self.beta, d)?;
                Environment {
                    kind,
                    dim: d,
                    nu: self.nu,
                    horizon: self.horizon,
                    hamiltonian: Hamiltonian::Quadratic { beta: self.beta },
                    interaction: Interaction {
                        entropy: (self.gamma > 0.0).then(|| EntropyInteraction {
                            gamma: self.gamma,
                            scale: (self.gamma / self.nu).sqrt(),
                        }),
                        ..Default::default()
                    },
                    terminal: TerminalCost::Quadratic {
                        alpha: sol.alpha,
                        offset: sol.time_rate() * self.horizon,
                    },
                    rho0: sol.initial_density(),
                }
            }
            ExperimentKind::Quadcopter => {
                let mut center = vec![0.0; d];
                let mut stds = vec![0.0; d];
                for i in quad::POSITIONS {
                    center[i] = -2.0;
                    stds[i] = 0.5;
                }
                Environment {
                    kind,
                    dim: d,
                    nu: self.nu,
                    horizon: self.horizon,
                    hamiltonian: Hamiltonian::Quadcopter {
                        mass: self.mass,
                        gravity: self.gravity,
                        variant: if self.hamiltonian_variant == "paper" {
                            QuadcopterVariant::Paper
                        } else {
                            QuadcopterVariant::Derived
                        },
                    },
                    interaction: Interaction {
                        congestion: Some(Congestion::Gaussian {
                            gamma: self.gamma_cong,
                        }),
                        ..Default::default()
                    },
                    terminal: TerminalCost::Distance {
                        coords: vec![quad::X, quad::Y, quad::Z, quad::VX, quad::VY, quad::VZ],
                        target: vec![2.0, 2.0, 2.0, 0.0, 0.0, 0.0],
                        eps,
                    },
                    rho0: InitialDensity {
                        center,
                        std: stds,
                    },
                }
            }
        };
        env.validate()?;
        Ok(env)
    }
}
