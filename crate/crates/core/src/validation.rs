//! Closed-form reference solution, kernel density estimation and error metrics.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::environments::InitialDensity;
use crate::error::{Error, Result};

/// Stationary quadratic solution for `H = |p|^2/2 - beta |x|^2/2`, `f = gamma ln rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSolution {
    pub gamma: f64,
    pub nu: f64,
    pub beta: f64,
    pub dim: usize,
    pub alpha: f64,
}

impl AnalyticSolution {
    pub fn new(gamma: f64, nu: f64, beta: f64, dim: usize) -> Result<Self> {
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::config("gamma", "must be >= 0"));
        }
        if nu <= 0.0 || !nu.is_finite() {
            return Err(Error::config("nu", "the closed-form solution needs nu > 0"));
        }
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::config("beta", "must be > 0"));
        }
        if dim == 0 {
            return Err(Error::config("dim", "must be >= 1"));
        }
        let alpha = (-gamma + (gamma * gamma + 4.0 * nu * nu * beta).sqrt()) / (2.0 * nu);
        Ok(AnalyticSolution {
            gamma,
            nu,
            beta,
            dim,
            alpha,
        })
    }

    /// Rate at which `phi` decreases in time.
    pub fn time_rate(&self) -> f64 {
        let d = self.dim as f64;
        self.nu * d * self.alpha + 0.5 * self.gamma * d * (self.alpha / (2.0 * PI * self.nu)).ln()
    }

    /// Standard deviation of the (stationary, Gaussian) density.
    pub fn density_std(&self) -> f64 {
        (self.nu / self.alpha).sqrt()
    }

    pub fn initial_density(&self) -> InitialDensity {
        InitialDensity::isotropic(vec![0.0; self.dim], self.density_std())
    }

    pub fn phi(&self, x: &[f64], t: f64) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        0.5 * self.alpha * r2 - self.time_rate() * t
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let d = self.dim as f64;
        (self.alpha / (2.0 * PI * self.nu)).powf(0.5 * d) * (-self.alpha * r2 / (2.0 * self.nu)).exp()
    }

    pub fn phi_rho(&self, x: &[f64], t: f64) -> (f64, f64) {
        (self.phi(x, t), self.rho(x))
    }
}

/// Gaussian kernel density estimate with Scott's bandwidth `B^{-1/(d+4)}`,
/// multiplied by a kernel scale.
#[derive(Debug, Clone)]
pub struct KdeEstimator {
    /// `B x d`, one sample per row.
    samples: Array2<f64>,
    bandwidth: f64,
    scale: f64,
}

impl KdeEstimator {
    /// `samples` is `d x B` (one sample per column).
    pub fn new(samples: Array2<f64>, scale: f64) -> Result<Self> {
        let (d, b) = samples.dim();
        if b == 0 {
            return Err(Error::InvalidArgument("kernel density estimate of zero samples".into()));
        }
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("kernel scale must be positive, got {scale}")));
        }
        Ok(KdeEstimator {
            samples: samples.t().as_standard_layout().into_owned(),
            bandwidth: (b as f64).powf(-1.0 / (d as f64 + 4.0)),
            scale,
        })
    }

    /// Scale taken from the pooled per-coordinate sample standard deviation.
    pub fn scott(samples: Array2<f64>) -> Result<Self> {
        let (d, b) = samples.dim();
        if b < 2 {
            return Err(Error::InvalidArgument("need at least two samples to estimate a spread".into()));
        }
        let var = samples
            .rows()
            .into_iter()
            .map(|r| {
                let m = r.sum() / b as f64;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b as f64 - 1.0)
            })
            .sum::<f64>()
            / d as f64;
        Self::new(samples, var.sqrt())
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    fn width(&self) -> f64 {
        self.bandwidth * self.scale
    }

    fn normalizer(&self) -> f64 {
        ((2.0 * PI).sqrt() * self.width()).powi(self.dim() as i32).recip()
    }

    pub fn density(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(Error::dim("density query", self.dim(), q.len()));
        }
        let inv = 0.5 / (self.width() * self.width());
        let sum: f64 = self
            .samples
            .rows()
            .into_iter()
            .map(|s| {
                let r2: f64 = s.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (-r2 * inv).exp()
            })
            .sum();
        Ok(self.normalizer() * sum / self.len() as f64)
    }

    /// Density and its gradient with respect to the query.
    pub fn density_with_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        if q.len() != self.dim() {
            return Err(Error::dim("density query", self.dim(), q.len()));
        }
        let w2 = self.width() * self.width();
        let mut sum = 0.0;
        let mut grad = vec![0.0; q.len()];
        for s in self.samples.rows() {
            let r2: f64 = s.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * r2 / w2).exp();
            sum += k;
            for (g, (a, b)) in grad.iter_mut().zip(s.iter().zip(q)) {
                *g -= k * (b - a) / w2;
            }
        }
        let c = self.normalizer() / self.len() as f64;
        grad.iter_mut().for_each(|g| *g *= c);
        Ok((c * sum, grad))
    }
}

/// `|pred - truth|_2 / |truth|_2`.
pub fn relative_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("relative error", truth.len(), pred.len()));
    }
    let denom: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("relative error against an all-zero reference".into()));
    }
    let num: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    /// 32 x 32 lattice on `[-2, 2]^2` times 16 instants on `[0, 1]`.
    Grid2d,
    /// 4096 draws from the initial density with uniform times.
    Samples,
}

pub const GRID_SIDE: usize = 32;
pub const GRID_TIMES: usize = 16;
pub const VALIDATION_SAMPLES: usize = 4096;

/// Evaluation points: `x` is `d x N`, `t` has `N` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationPoints {
    pub x: Array2<f64>,
    pub t: Array1<f64>,
}

impl ValidationPoints {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn build_validation_points(
    sol: &AnalyticSolution,
    mode: ValidationMode,
    horizon: f64,
    seed: u64,
) -> Result<ValidationPoints> {
    match mode {
        ValidationMode::Grid2d => {
            if sol.dim != 2 {
                return Err(Error::InvalidArgument(format!(
                    "grid validation is only defined for d = 2, got d = {}",
                    sol.dim
                )));
            }
            let axis = linspace(-2.0, 2.0, GRID_SIDE);
            let times = linspace(0.0, horizon, GRID_TIMES);
            let n = GRID_SIDE * GRID_SIDE * GRID_TIMES;
            let mut x = Array2::zeros((2, n));
            let mut t = Array1::zeros(n);
            let mut k = 0;
            for &tv in &times {
                for &a in &axis {
                    for &b in &axis {
                        x[[0, k]] = a;
                        x[[1, k]] = b;
                        t[k] = tv;
                        k += 1;
                    }
                }
            }
            Ok(ValidationPoints { x, t })
        }
        ValidationMode::Samples => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = sol.initial_density().sample(VALIDATION_SAMPLES, &mut rng);
            let t = Array1::from_iter((0..VALIDATION_SAMPLES).map(|_| rng.random_range(0.0..=horizon)));
            Ok(ValidationPoints { x, t })
        }
    }
}
