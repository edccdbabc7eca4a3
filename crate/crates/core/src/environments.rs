//! Problem instances: Hamiltonians, interaction costs, terminal costs and
//! initial densities.
//!
//! Obstacle and congestion costs only look at the first two coordinates
//! (the quadcopter congestion looks at its three positions), so the same
//! instance can be solved in any dimension.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::networks::TerminalField;
use crate::validation::KdeEstimator;

/// Quadcopter state layout `(x1,x2,y1,y2,z1,z2,psi1,psi2,theta1,theta2,phi1,phi2)`.
pub mod quad {
    pub const STATE_DIM: usize = 12;
    pub const X: usize = 0;
    pub const VX: usize = 1;
    pub const Y: usize = 2;
    pub const VY: usize = 3;
    pub const Z: usize = 4;
    pub const VZ: usize = 5;
    pub const PSI: usize = 6;
    pub const VPSI: usize = 7;
    pub const THETA: usize = 8;
    pub const VTHETA: usize = 9;
    pub const PHI: usize = 10;
    pub const VPHI: usize = 11;
    pub const POSITIONS: [usize; 3] = [X, Y, Z];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    NuSweep,
    Obstacle,
    Congestion,
    Bottleneck,
    Symmetric,
    Analytic,
    Quadcopter,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::NuSweep,
        ExperimentKind::Obstacle,
        ExperimentKind::Congestion,
        ExperimentKind::Bottleneck,
        ExperimentKind::Symmetric,
        ExperimentKind::Analytic,
        ExperimentKind::Quadcopter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::NuSweep => "nu_sweep",
            ExperimentKind::Obstacle => "obstacle",
            ExperimentKind::Congestion => "congestion",
            ExperimentKind::Bottleneck => "bottleneck",
            ExperimentKind::Symmetric => "symmetric",
            ExperimentKind::Analytic => "analytic",
            ExperimentKind::Quadcopter => "quadcopter",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ExperimentKind::NuSweep => "free-space transport from (-2,-2) to (2,2); vary nu to see the density widen",
            ExperimentKind::Obstacle => "two rotated quadratic obstacles between (-2,-2) and (2,2)",
            ExperimentKind::Congestion => "inverse-squared-distance congestion, (-2,0) to (2,0)",
            ExperimentKind::Bottleneck => "congestion plus a bottleneck obstacle",
            ExperimentKind::Symmetric => "symmetric obstacle on the diagonal that splits the density",
            ExperimentKind::Analytic => "entropy interaction with a closed-form quadratic solution",
            ExperimentKind::Quadcopter => "12-D quadrotor dynamics with Gaussian spatial congestion",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// `c * (sqrt(|p|^2 + eps^2) - eps)`: the speed-limited Hamiltonian, smoothed
/// at the origin and shifted so that it vanishes there.
pub fn hamiltonian_norm(c: f64, p: &[f64], eps: f64) -> f64 {
    let sq: f64 = p.iter().map(|v| v * v).sum();
    c * ((sq + eps * eps).sqrt() - eps)
}

fn thrust_factors(x: &[f64]) -> ([f64; 3], [[f64; 3]; 3]) {
    let (sps, cps) = x[quad::PSI].sin_cos();
    let (sth, cth) = x[quad::THETA].sin_cos();
    let (sph, cph) = x[quad::PHI].sin_cos();
    let a = [
        sph * sps + cph * cps * sth,
        -cps * sph + cph * sth * sps,
        cth * cph,
    ];
    // rows: a1, a2, a3; columns: d/dpsi, d/dtheta, d/dphi
    let da = [
        [sph * cps - cph * sps * sth, cph * cps * cth, cph * sps - sph * cps * sth],
        [sps * sph + cph * sth * cps, cph * cth * sps, -cps * cph - sph * sth * sps],
        [0.0, -sth * cph, -cth * sph],
    ];
    (a, da)
}

/// Quadcopter drift: velocities in the position slots, gravity on the z-velocity.
fn quad_drift(x: &[f64], gravity: f64) -> [f64; quad::STATE_DIM] {
    let mut f = [0.0; quad::STATE_DIM];
    for i in (0..quad::STATE_DIM).step_by(2) {
        f[i] = x[i + 1];
    }
    f[quad::VZ] = -gravity;
    f
}

/// `sup_u { -p . h(x, u) - |u|^2 / 2 }` for the control-affine quadrotor
/// dynamics `h = f0(x) + B(x) u`, i.e. `-p . f0 + |B^T p|^2 / 2`.
pub fn quadcopter_hamiltonian(x: &[f64], p: &[f64], mass: f64, gravity: f64) -> Result<f64> {
    if x.len() != quad::STATE_DIM || p.len() != quad::STATE_DIM {
        return Err(Error::dim("quadcopter state", quad::STATE_DIM, x.len().min(p.len())));
    }
    let f0 = quad_drift(x, gravity);
    let (a, _) = thrust_factors(x);
    let drift: f64 = p.iter().zip(f0.iter()).map(|(p, f)| p * f).sum();
    let thrust = (a[0] * p[quad::VX] + a[1] * p[quad::VY] + a[2] * p[quad::VZ]) / mass;
    let torques = p[quad::VPSI].powi(2) + p[quad::VTHETA].powi(2) + p[quad::VPHI].powi(2);
    Ok(-drift + 0.5 * (thrust * thrust + torques))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadcopterVariant {
    /// Full Legendre transform of the control-affine dynamics.
    Derived,
    /// `|p|^2 / 2`, ignoring the dynamics.
    Paper,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hamiltonian {
    /// `c |p|`, smoothed by `eps`.
    Norm { c: f64, eps: f64 },
    /// `|p|^2 / 2 - beta |x|^2 / 2`.
    Quadratic { beta: f64 },
    Quadcopter {
        mass: f64,
        gravity: f64,
        variant: QuadcopterVariant,
    },
}

impl Hamiltonian {
    /// Value of `H(x, p)`; writes `dH/dp` and `dH/dx` into the given buffers.
    pub fn eval(&self, x: &[f64], p: &[f64], dp: &mut [f64], dx: &mut [f64]) -> f64 {
        dx.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            Hamiltonian::Norm { c, eps } => {
                let r = (p.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
                for (d, v) in dp.iter_mut().zip(p) {
                    *d = c * v / r;
                }
                c * (r - eps)
            }
            Hamiltonian::Quadratic { beta } => {
                dp.copy_from_slice(p);
                let mut xx = 0.0;
                for (d, v) in dx.iter_mut().zip(x) {
                    *d = -beta * v;
                    xx += v * v;
                }
                0.5 * p.iter().map(|v| v * v).sum::<f64>() - 0.5 * beta * xx
            }
            Hamiltonian::Quadcopter { variant: QuadcopterVariant::Paper, .. } => {
                dp.copy_from_slice(p);
                0.5 * p.iter().map(|v| v * v).sum::<f64>()
            }
            Hamiltonian::Quadcopter {
                mass,
                gravity,
                variant: QuadcopterVariant::Derived,
            } => {
                let f0 = quad_drift(x, gravity);
                let (a, da) = thrust_factors(x);
                let vel = [quad::VX, quad::VY, quad::VZ];
                let thrust = (0..3).map(|k| a[k] * p[vel[k]]).sum::<f64>() / mass;
                for i in 0..quad::STATE_DIM {
                    dp[i] = -f0[i];
                }
                for k in 0..3 {
                    dp[vel[k]] += thrust * a[k] / mass;
                }
                for &i in &[quad::VPSI, quad::VTHETA, quad::VPHI] {
                    dp[i] += p[i];
                }
                // -p . f0 depends on the velocity slots.
                for i in (0..quad::STATE_DIM).step_by(2) {
                    dx[i + 1] = -p[i];
                }
                for (col, &angle) in [quad::PSI, quad::THETA, quad::PHI].iter().enumerate() {
                    let dthrust = (0..3).map(|k| da[k][col] * p[vel[k]]).sum::<f64>() / mass;
                    dx[angle] += thrust * dthrust;
                }
                let drift: f64 = p.iter().zip(f0.iter()).map(|(p, f)| p * f).sum();
                let torques = p[quad::VPSI].powi(2) + p[quad::VTHETA].powi(2) + p[quad::VPHI].powi(2);
                -drift + 0.5 * (thrust * thrust + torques)
            }
        }
    }

    pub fn value(&self, x: &[f64], p: &[f64]) -> f64 {
        let mut dp = vec![0.0; p.len()];
        let mut dx = vec![0.0; x.len()];
        self.eval(x, p, &mut dp, &mut dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObstacleKind {
    /// Two rotated quadratic obstacles.
    Twin,
    Bottleneck,
    Symmetric,
}

fn require_planar(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::dim("obstacle point", 2, x.len()));
    }
    Ok(())
}

/// Obstacle cost and its gradient with respect to `(x1, x2)`.
fn obstacle_with_grad(kind: ObstacleKind, gamma: f64, x: &[f64]) -> (f64, [f64; 2]) {
    let (x1, x2) = (x[0], x[1]);
    match kind {
        ObstacleKind::Twin => {
            let (s, c) = (PI / 5.0).sin_cos();
            // v = u R with R = [[c, -s], [s, c]]
            let rotated = |u0: f64, u1: f64| (u0 * c + u1 * s, -u0 * s + u1 * c);
            let back = |g0: f64, g1: f64| [c * g0 - s * g1, s * g0 + c * g1];
            let mut total = 0.0;
            let mut grad = [0.0; 2];
            for (center, sign) in [((-2.0, 0.5), -1.0), ((2.0, -0.5), 1.0)] {
                let (v0, v1) = rotated(x1 - center.0, x2 - center.1);
                let f = -5.0 * v0 * v0 + sign * 2.0 * v1 - 1.0;
                if f > 0.0 {
                    total += f;
                    let g = back(-10.0 * v0, sign * 2.0);
                    grad[0] += g[0];
                    grad[1] += g[1];
                }
            }
            (gamma * total, [gamma * grad[0], gamma * grad[1]])
        }
        ObstacleKind::Bottleneck => {
            let f = -5.0 * x1 * x1 + x2 * x2 - 0.1;
            if f > 0.0 {
                (gamma * f, [-10.0 * gamma * x1, 2.0 * gamma * x2])
            } else {
                (0.0, [0.0; 2])
            }
        }
        ObstacleKind::Symmetric => {
            let f = -(x1 * x1 + 1.6 * x1 * x2 + x2 * x2) + 0.1;
            if f > 0.0 {
                (
                    gamma * f,
                    [-gamma * (2.0 * x1 + 1.6 * x2), -gamma * (1.6 * x1 + 2.0 * x2)],
                )
            } else {
                (0.0, [0.0; 2])
            }
        }
    }
}

/// Obstacle penalty at `x`; only `(x1, x2)` are used.
pub fn obstacle_cost(kind: ObstacleKind, gamma: f64, x: &[f64]) -> Result<f64> {
    require_planar(x)?;
    Ok(obstacle_with_grad(kind, gamma, x).0)
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, min_dim: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim("congestion batch size", a.ncols(), b.ncols()));
    }
    if a.nrows() < min_dim {
        return Err(Error::dim("congestion point dimension", min_dim, a.nrows()));
    }
    Ok(())
}

/// `1 / (|(a1,a2) - (b1,b2)|^2 + 1)` per column pair.
pub fn inverse_square_kernel(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_pair(a, b, 2)?;
    Ok((0..a.ncols())
        .map(|j| {
            let d0 = a[[0, j]] - b[[0, j]];
            let d1 = a[[1, j]] - b[[1, j]];
            1.0 / (d0 * d0 + d1 * d1 + 1.0)
        })
        .collect())
}

/// Batch estimate of the pairwise inverse-squared-distance congestion.
/// Points are columns; the two batches are paired column by column.
pub fn congestion_estimate(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let k = inverse_square_kernel(a, b)?;
    Ok(k.iter().sum::<f64>() / k.len() as f64)
}

/// `gamma (2 pi)^{-3/2} exp(-|d|^2 / 2)` on the quadcopter positions, per column pair.
pub fn gaussian_kernel(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64) -> Result<Vec<f64>> {
    if a.nrows() != quad::STATE_DIM {
        return Err(Error::dim("quadcopter state layout", quad::STATE_DIM, a.nrows()));
    }
    check_pair(a, b, quad::STATE_DIM)?;
    let norm = gamma * (2.0 * PI).powf(-1.5);
    Ok((0..a.ncols())
        .map(|j| {
            let sq: f64 = quad::POSITIONS
                .iter()
                .map(|&i| (a[[i, j]] - b[[i, j]]).powi(2))
                .sum();
            norm * (-0.5 * sq).exp()
        })
        .collect())
}

pub fn gaussian_congestion(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64) -> Result<f64> {
    let k = gaussian_kernel(a, b, gamma)?;
    Ok(k.iter().sum::<f64>() / k.len() as f64)
}

/// Guard for `ln` of a vanishing density estimate.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// `gamma ln(max(rho_hat(q), floor))` for each query column.
pub fn entropy_interaction(query: ArrayView2<'_, f64>, kde: &KdeEstimator, gamma: f64) -> Result<Vec<f64>> {
    if gamma == 0.0 {
        return Ok(vec![0.0; query.ncols()]);
    }
    (0..query.ncols())
        .map(|j| {
            let q = query.column(j).to_vec();
            Ok(gamma * kde.density(&q)?.max(DENSITY_FLOOR).ln())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Congestion {
    /// Pairwise `1 / (|d|^2 + 1)` on the first two coordinates.
    InverseSquare { weight: f64 },
    /// Gaussian kernel on the quadcopter positions.
    Gaussian { gamma: f64 },
}

/// Interaction term `f` of one environment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Interaction {
    pub obstacle: Option<(ObstacleKind, f64)>,
    pub congestion: Option<Congestion>,
    /// `gamma ln rho`, with `rho` estimated by a kernel density estimate of the batch.
    pub entropy: Option<EntropyInteraction>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyInteraction {
    pub gamma: f64,
    /// Kernel scale multiplying the Scott bandwidth.
    pub scale: f64,
}

/// Per-sample interaction values and, on request, their gradients (`dim x B`).
pub struct InteractionEval {
    pub values: Vec<f64>,
    pub grad: Option<Array2<f64>>,
}

impl Interaction {
    pub fn needs_partner(&self) -> bool {
        self.congestion.is_some()
    }

    pub fn is_zero(&self) -> bool {
        self.obstacle.is_none() && self.congestion.is_none() && self.entropy.is_none()
    }

    /// Evaluates `f` at the columns of `points`.
    ///
    /// `partner` is a second batch pushed through the generator at the same
    /// times; it and the density estimate (fitted on `points`) are treated as
    /// constants, so gradients flow through the query points only.
    pub fn evaluate(
        &self,
        points: ArrayView2<'_, f64>,
        partner: Option<ArrayView2<'_, f64>>,
        want_grad: bool,
    ) -> Result<InteractionEval> {
        let (dim, b) = points.dim();
        let mut values = vec![0.0; b];
        let mut grad = want_grad.then(|| Array2::zeros((dim, b)));

        if let Some((kind, gamma)) = self.obstacle {
            if dim < 2 {
                return Err(Error::dim("obstacle point", 2, dim));
            }
            for j in 0..b {
                let (v, g) = obstacle_with_grad(kind, gamma, &[points[[0, j]], points[[1, j]]]);
                values[j] += v;
                if let Some(gr) = grad.as_mut() {
                    gr[[0, j]] += g[0];
                    gr[[1, j]] += g[1];
                }
            }
        }

        if let Some(cong) = self.congestion {
            let other = partner.ok_or_else(|| {
                Error::InvalidArgument("congestion needs a second generated batch".into())
            })?;
            match cong {
                Congestion::InverseSquare { weight } => {
                    let k = inverse_square_kernel(points, other)?;
                    for j in 0..b {
                        values[j] += weight * k[j];
                        if let Some(gr) = grad.as_mut() {
                            for i in 0..2 {
                                let d = points[[i, j]] - other[[i, j]];
                                gr[[i, j]] += -2.0 * weight * d * k[j] * k[j];
                            }
                        }
                    }
                }
                Congestion::Gaussian { gamma } => {
                    let k = gaussian_kernel(points, other, gamma)?;
                    for j in 0..b {
                        values[j] += k[j];
                        if let Some(gr) = grad.as_mut() {
                            for &i in &quad::POSITIONS {
                                gr[[i, j]] += -k[j] * (points[[i, j]] - other[[i, j]]);
                            }
                        }
                    }
                }
            }
        }

        if let Some(ent) = self.entropy {
            if ent.gamma != 0.0 {
                let kde = KdeEstimator::new(points.to_owned(), ent.scale)?;
                for j in 0..b {
                    let q = points.column(j).to_vec();
                    let (rho, drho) = kde.density_with_grad(&q)?;
                    if rho > DENSITY_FLOOR {
                        values[j] += ent.gamma * rho.ln();
                        if let Some(gr) = grad.as_mut() {
                            for i in 0..dim {
                                gr[[i, j]] += ent.gamma * drho[i] / rho;
                            }
                        }
                    } else {
                        values[j] += ent.gamma * DENSITY_FLOOR.ln();
                    }
                }
            }
        }

        Ok(InteractionEval { values, grad })
    }
}

/// Terminal costs, recorded on the tape so that their derivatives propagate.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    /// `sqrt(|x_S - target|^2 + eps^2)` over the coordinates `S`.
    Distance {
        coords: Vec<usize>,
        target: Vec<f64>,
        eps: f64,
    },
    /// `alpha |x|^2 / 2 - offset`.
    Quadratic { alpha: f64, offset: f64 },
}

impl TerminalCost {
    /// Plain evaluation at a spatial point.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TerminalCost::Distance { coords, target, eps } => {
                let sq: f64 = coords.iter().zip(target).map(|(&i, t)| (x[i] - t).powi(2)).sum();
                (sq + eps * eps).sqrt()
            }
            TerminalCost::Quadratic { alpha, offset } => {
                0.5 * alpha * x.iter().map(|v| v * v).sum::<f64>() - offset
            }
        }
    }
}

impl TerminalField for TerminalCost {
    fn record(&self, tape: &mut Tape<'_>, x: NodeId, dim: usize) -> Result<NodeId> {
        match self {
            TerminalCost::Distance { coords, target, eps } => {
                let k = coords.len();
                let mut sel = Array2::zeros((k, dim + 1));
                for (r, &c) in coords.iter().enumerate() {
                    if c >= dim {
                        return Err(Error::dim("terminal coordinate", dim, c + 1));
                    }
                    sel[[r, c]] = 1.0;
                }
                let shift = tape.constant(sel, Array1::from_iter(target.iter().map(|t| -t)));
                let diff = tape.affine(shift, x, None)?;
                let sq = tape.activate(Activation::Square, diff);
                let sum = tape.constant(Array2::ones((1, k)), Array1::from_elem(1, eps * eps));
                let r2 = tape.affine(sum, sq, None)?;
                Ok(tape.activate(Activation::Sqrt, r2))
            }
            TerminalCost::Quadratic { alpha, offset } => {
                let sq = tape.activate(Activation::Square, x);
                let mut w = Array2::from_elem((1, dim + 1), 0.5 * alpha);
                w[[0, dim]] = 0.0;
                let lin = tape.constant(w, Array1::from_elem(1, -offset));
                tape.affine(lin, sq, None)
            }
        }
    }
}

/// Product of independent normals; a zero standard deviation pins a coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDensity {
    pub center: Vec<f64>,
    pub std: Vec<f64>,
}

impl InitialDensity {
    pub fn isotropic(center: Vec<f64>, std: f64) -> Self {
        let n = center.len();
        InitialDensity {
            center,
            std: vec![std; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `n` draws as the columns of a `dim x n` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((d, n));
        for j in 0..n {
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                out[[i, j]] = self.center[i] + self.std[i] * e;
            }
        }
        out
    }
}

/// One mean-field game instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub kind: ExperimentKind,
    pub dim: usize,
    pub nu: f64,
    pub horizon: f64,
    pub hamiltonian: Hamiltonian,
    pub interaction: Interaction,
    pub terminal: TerminalCost,
    pub rho0: InitialDensity,
}

/// A training batch: `z` is `dim x B`, times are uniform on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub z: Array2<f64>,
    pub t: Array1<f64>,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        if self.nu < 0.0 || !self.nu.is_finite() {
            return Err(Error::config("nu", "must be a finite number >= 0"));
        }
        if self.horizon <= 0.0 || !self.horizon.is_finite() {
            return Err(Error::config("T", "must be positive"));
        }
        if self.rho0.dim() != self.dim || self.rho0.std.len() != self.dim {
            return Err(Error::dim("initial density dimension", self.dim, self.rho0.dim()));
        }
        if self.rho0.std.iter().any(|s| *s < 0.0) || self.rho0.std.iter().all(|s| *s == 0.0) {
            return Err(Error::config("rho0", "standard deviations must be >= 0 and not all zero"));
        }
        Ok(())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<BatchSample> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let z = self.rho0.sample(batch, rng);
        let t = Array1::from_iter((0..batch).map(|_| rng.random_range(0.0..=self.horizon)));
        Ok(BatchSample { z, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_hamiltonian_examples() {
        assert_eq!(hamiltonian_norm(8.0, &[0.0, 0.0], 1e-3), 0.0);
        let mut p = vec![0.0; 6];
        p[0] = 3.0;
        p[1] = 4.0;
        assert!((hamiltonian_norm(8.0, &p, 1e-12) - 40.0).abs() < 1e-9);
        assert!((hamiltonian_norm(8.0, &p, 1e-3) - 40.0).abs() <= 8.0 * 1e-3);
    }

    #[test]
    fn bottleneck_examples() {
        assert_eq!(obstacle_cost(ObstacleKind::Bottleneck, 5.0, &[0.0, 0.0]).unwrap(), 0.0);
        let v = obstacle_cost(ObstacleKind::Bottleneck, 5.0, &[0.0, 1.0]).unwrap();
        assert!((v - 4.5).abs() < 1e-12);
    }

    #[test]
    fn twin_obstacle_center_is_outside() {
        assert_eq!(obstacle_cost(ObstacleKind::Twin, 5.0, &[-2.0, 0.5]).unwrap(), 0.0);
        assert_eq!(obstacle_cost(ObstacleKind::Twin, 5.0, &[2.0, -0.5, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn twin_obstacle_is_active_somewhere() {
        // Just below the first center along the rotated axis, f1 > 0.
        let (s, c) = (PI / 5.0).sin_cos();
        // v = (0, -1) => u = v R^T
        let u = (s, -c);
        let x = [-2.0 + u.0, 0.5 + u.1];
        let v = obstacle_cost(ObstacleKind::Twin, 5.0, &x).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn symmetric_obstacle_at_origin() {
        let v = obstacle_cost(ObstacleKind::Symmetric, 20.0, &[0.0, 0.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert_eq!(obstacle_cost(ObstacleKind::Symmetric, 20.0, &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn obstacle_needs_two_coordinates() {
        assert!(obstacle_cost(ObstacleKind::Twin, 5.0, &[1.0]).is_err());
    }

    #[test]
    fn obstacle_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [ObstacleKind::Twin, ObstacleKind::Bottleneck, ObstacleKind::Symmetric] {
            let mut checked = 0;
            while checked < 20 {
                let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let (v, g) = obstacle_with_grad(kind, 7.0, &x);
                if v == 0.0 {
                    continue;
                }
                let h = 1e-6;
                for i in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (obstacle_with_grad(kind, 7.0, &xp).0 - obstacle_with_grad(kind, 7.0, &xm).0)
                        / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{kind:?} {fd} {}", g[i]);
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn congestion_examples() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [5.0, 5.0]];
        assert_eq!(congestion_estimate(a.view(), a.view()).unwrap(), 1.0);
        let b = array![[1.0, 1.0], [2.0, 0.0], [-3.0, 8.0]];
        assert_eq!(congestion_estimate(a.view(), b.view()).unwrap(), 0.5);
        let far = &a + 1e3;
        assert!(congestion_estimate(a.view(), far.view()).unwrap() < 1e-6);
        let short = array![[0.0], [1.0], [2.0]];
        assert!(congestion_estimate(a.view(), short.view()).is_err());
    }

    #[test]
    fn gaussian_congestion_examples() {
        let a = Array2::from_shape_fn((12, 3), |(i, j)| (i * j) as f64 * 0.1);
        let at_zero = gaussian_congestion(a.view(), a.view(), 20.0).unwrap();
        assert!((at_zero - 20.0 * (2.0 * PI).powf(-1.5)).abs() < 1e-14);
        assert!((at_zero - 1.269_873).abs() < 1e-5);
        let mut b = a.clone();
        b.row_mut(quad::X).mapv_inplace(|v| v + 1.0);
        b.row_mut(quad::Z).mapv_inplace(|v| v - 1.0);
        // non-spatial coordinates are ignored
        b.row_mut(quad::VX).mapv_inplace(|v| v + 100.0);
        let v = gaussian_congestion(a.view(), b.view(), 20.0).unwrap();
        assert!((v - at_zero * (-1.0f64).exp()).abs() < 1e-14);
        let far = &a + 1e3;
        assert_eq!(gaussian_congestion(a.view(), far.view(), 20.0).unwrap(), 0.0);
        let wrong = Array2::zeros((4, 3));
        assert!(gaussian_congestion(wrong.view(), wrong.view(), 20.0).is_err());
    }

    #[test]
    fn quadcopter_examples() {
        let x = [0.0; 12];
        assert_eq!(quadcopter_hamiltonian(&x, &[0.0; 12], 0.5, 9.81).unwrap(), 0.0);
        let mut p = [0.0; 12];
        p[quad::VZ] = 1.0;
        let h = quadcopter_hamiltonian(&x, &p, 0.5, 9.81).unwrap();
        assert!((h - 11.81).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hams = [
            (Hamiltonian::Norm { c: 8.0, eps: 1e-3 }, 5),
            (Hamiltonian::Quadratic { beta: 1.3 }, 4),
            (
                Hamiltonian::Quadcopter {
                    mass: 0.5,
                    gravity: 9.81,
                    variant: QuadcopterVariant::Derived,
                },
                12,
            ),
            (
                Hamiltonian::Quadcopter {
                    mass: 0.5,
                    gravity: 9.81,
                    variant: QuadcopterVariant::Paper,
                },
                12,
            ),
        ];
        for (ham, d) in hams {
            for _ in 0..10 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut dp = vec![0.0; d];
                let mut dx = vec![0.0; d];
                ham.eval(&x, &p, &mut dp, &mut dx);
                let h = 1e-6;
                for i in 0..d {
                    let bump = |v: &Vec<f64>, s: f64| {
                        let mut w = v.clone();
                        w[i] += s;
                        w
                    };
                    let fdp = (ham.value(&x, &bump(&p, h)) - ham.value(&x, &bump(&p, -h))) / (2.0 * h);
                    let fdx = (ham.value(&bump(&x, h), &p) - ham.value(&bump(&x, -h), &p)) / (2.0 * h);
                    assert!((fdp - dp[i]).abs() < 1e-6 * (1.0 + fdp.abs()), "{ham:?} dp{i}");
                    assert!((fdx - dx[i]).abs() < 1e-6 * (1.0 + fdx.abs()), "{ham:?} dx{i}");
                }
                if let Hamiltonian::Quadcopter { variant: QuadcopterVariant::Derived, .. } = ham {
                    let direct = quadcopter_hamiltonian(&x, &p, 0.5, 9.81).unwrap();
                    assert!((direct - ham.value(&x, &p)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interaction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rho = InitialDensity::isotropic(vec![0.0; 12], 0.8);
        let pts = rho.sample(6, &mut rng);
        let partner = rho.sample(6, &mut rng);
        let cases = [
            Interaction {
                obstacle: Some((ObstacleKind::Symmetric, 20.0)),
                congestion: Some(Congestion::InverseSquare { weight: 1.0 }),
                entropy: None,
            },
            Interaction {
                obstacle: None,
                congestion: Some(Congestion::Gaussian { gamma: 20.0 }),
                entropy: None,
            },
        ];
        for inter in cases {
            let ev = inter.evaluate(pts.view(), Some(partner.view()), true).unwrap();
            let grad = ev.grad.unwrap();
            for j in 0..6 {
                for i in 0..12 {
                    let h = 1e-6;
                    let mut p = pts.clone();
                    p[[i, j]] += h;
                    let up = inter.evaluate(p.view(), Some(partner.view()), false).unwrap().values[j];
                    p[[i, j]] -= 2.0 * h;
                    let dn = inter.evaluate(p.view(), Some(partner.view()), false).unwrap().values[j];
                    let fd = (up - dn) / (2.0 * h);
                    assert!((fd - grad[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn sample_batch_statistics() {
        let env_rho = InitialDensity::isotropic(vec![-2.0, -2.0, 0.0], 1.0 / 10f64.sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let z = env_rho.sample(n, &mut rng);
        let se = 1.0 / 10f64.sqrt() / (n as f64).sqrt();
        for i in 0..3 {
            let mean = z.row(i).sum() / n as f64;
            assert!((mean - env_rho.center[i]).abs() < 4.0 * se, "coord {i}: {mean}");
        }
    }

    #[test]
    fn terminal_distance_matches_tape() {
        let term = TerminalCost::Distance {
            coords: vec![0, 1],
            target: vec![2.0, 2.0],
            eps: 1e-3,
        };
        let mut tape = Tape::new();
        let x = tape.leaf_values(array![[0.5], [-1.0], [7.0], [0.3]]);
        let lifted = tape.lift(x, 3).unwrap();
        let g = term.record(&mut tape, lifted, 3).unwrap();
        let st = tape.aug_state(g, 0, 0);
        let r = (1.5f64 * 1.5 + 3.0 * 3.0 + 1e-6).sqrt();
        assert!((st.value - term.value(&[0.5, -1.0, 7.0])).abs() < 1e-15);
        assert!((st.value - r).abs() < 1e-15);
        assert!((st.jac[0] + 1.5 / r).abs() < 1e-15);
        assert!((st.jac[1] + 3.0 / r).abs() < 1e-15);
        assert_eq!(st.jac[2], 0.0);
        assert_eq!(st.jac[3], 0.0);
        // Laplacian of sqrt(|v|^2 + e^2) in 2 active coordinates: (1 + e^2 / r^2) / r
        let lap = (1.0 + 1e-6 / (r * r)) / r;
        assert!((st.lap - lap).abs() < 1e-14);
    }
}
