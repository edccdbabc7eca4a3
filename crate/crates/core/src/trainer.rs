//! Alternating training of the value network and the generator.
//!
//! One outer iteration performs one value-network step followed by one
//! generator step. The value network ascends
//! `l0 + lt = mean phi(x_b, 0) + mean[d_t phi + nu lap phi - H(x_b, grad phi)]`
//! and descends the residual penalty `lambda * mean |d_t phi + nu lap phi - H + f|`
//! at generated points `x_b = G(z_b, t_b)` (generator detached). The
//! generator descends `mean[d_t phi + nu lap phi - H + f]` at its own outputs
//! with the value network frozen; that gradient runs through every
//! derivative of `phi` with respect to its spatial argument.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AugState, NodeId, Tape};
use crate::environments::{BatchSample, Environment, InteractionEval};
use crate::error::{Error, Result};
use crate::networks::{
    generate, generator_eval, init_params, stack_time, value_eval, NetworkParams, ResNetConfig, Role,
    ValueModel,
};
use crate::validation::{
    build_validation_points, linspace, relative_error, AnalyticSolution, KdeEstimator, ValidationMode,
    ValidationPoints, GRID_TIMES,
};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(adam: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != adam.m.len() {
        return Err(Error::dim("adam step", adam.m.len(), params.len().max(grads.len())));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        weight_decay,
        eps,
    } = adam.config;
    adam.step += 1;
    let bc1 = 1.0 - beta1.powi(adam.step as i32);
    let bc2 = 1.0 - beta2.powi(adam.step as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g;
        adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g * g;
        let m_hat = adam.m[i] / bc1;
        let v_hat = adam.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `d_t phi + nu lap phi - H(x, grad phi) + f` at one point.
///
/// `state.jac` holds the spatial gradient followed by the time derivative.
pub fn hjb_residual(env: &Environment, x: &[f64], state: &AugState, f: f64) -> f64 {
    let d = env.dim;
    state.jac[d] + env.nu * state.lap - env.hamiltonian.value(x, &state.jac[..d]) + f
}

/// Columns handled by one tape: bounded so that wide jacobians stay in memory.
fn chunk_len(dim: usize) -> usize {
    (8192 / (dim + 3)).max(16)
}

fn chunks(n: usize, dim: usize) -> Vec<(usize, usize)> {
    let c = chunk_len(dim);
    (0..n).step_by(c).map(|a| (a, (a + c).min(n))).collect()
}

/// Per-sample `d_t phi + nu lap phi - H` and the Hamiltonian's gradients.
struct Head {
    q: Vec<f64>,
    dp: Array2<f64>,
    dx: Array2<f64>,
}

/// Reads the first `x.ncols()` samples of `phi` (value, jac, lap blocks).
fn head(env: &Environment, tape: &Tape<'_>, phi: NodeId, x: ArrayView2<'_, f64>) -> Head {
    let (d, n) = x.dim();
    let mut q = vec![0.0; n];
    let mut dp = Array2::zeros((d, n));
    let mut dx = Array2::zeros((d, n));
    let lap = tape.lap_block(phi);
    let dt = tape.jac_block(phi, d);
    let grads: Vec<_> = (0..d).map(|k| tape.jac_block(phi, k)).collect();
    let mut p = vec![0.0; d];
    let mut xb = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gx = vec![0.0; d];
    for j in 0..n {
        for k in 0..d {
            p[k] = grads[k][[0, j]];
            xb[k] = x[[k, j]];
        }
        let h = env.hamiltonian.eval(&xb, &p, &mut gp, &mut gx);
        q[j] = dt[[0, j]] + env.nu * lap[[0, j]] - h;
        for k in 0..d {
            dp[[k, j]] = gp[k];
            dx[[k, j]] = gx[k];
        }
    }
    Head { q, dp, dx }
}

/// Adjoint for `phi` given per-sample weights on `q` (first `w.len()` samples)
/// and on the value of `phi` for samples `value_offset..`.
fn phi_seed(
    env: &Environment,
    tape: &Tape<'_>,
    phi: NodeId,
    w: &[f64],
    dp: &Array2<f64>,
    value_weights: Option<(usize, f64)>,
) -> Array2<f64> {
    let layout = tape.layout(phi);
    let d = env.dim;
    let mut seed = Array2::zeros((1, layout.cols()));
    for (j, &wj) in w.iter().enumerate() {
        seed[[0, layout.jac_cols(d).start + j]] = wj;
        seed[[0, layout.lap_cols().start + j]] = env.nu * wj;
        for k in 0..d {
            seed[[0, layout.jac_cols(k).start + j]] = -wj * dp[[k, j]];
        }
    }
    if let Some((offset, v)) = value_weights {
        for j in offset..layout.batch {
            seed[[0, j]] = v;
        }
    }
    seed
}

fn augmented_input(tape: &mut Tape<'_>, values: Array2<f64>, dim: usize) -> Result<NodeId> {
    let leaf = tape.leaf_values(values);
    tape.lift(leaf, dim)
}

/// Value-network loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhiLosses {
    pub l0: f64,
    pub lt: f64,
    pub lhjb: f64,
}

impl PhiLosses {
    /// The quantity minimised in the value parameters.
    pub fn objective(&self) -> f64 {
        -(self.l0 + self.lt) + self.lhjb
    }
}

/// Losses and value-parameter gradient of `-(l0 + lt) + lhjb` at fixed generated points.
///
/// `x` is `dim x B`; `f` holds the interaction at each column.
pub fn phi_objective(
    model: &ValueModel,
    env: &Environment,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    f: &[f64],
    lambda: f64,
) -> Result<(PhiLosses, Vec<f64>)> {
    let (d, b) = x.dim();
    let n_params = model.params().map_or(0, NetworkParams::len);
    let inv_b = 1.0 / b as f64;
    let parts: Vec<Result<(PhiLosses, Vec<f64>)>> = chunks(b, d)
        .into_par_iter()
        .map(|(lo, hi)| {
            let n = hi - lo;
            let xs = x.slice(s![.., lo..hi]);
            let ts = t.slice(s![lo..hi]);
            // Samples 0..n are (x, t); samples n..2n are (x, 0).
            let mut input = Array2::zeros((d + 1, 2 * n));
            input.slice_mut(s![..d, ..n]).assign(&xs);
            input.slice_mut(s![..d, n..]).assign(&xs);
            input.slice_mut(s![d, ..n]).assign(&ts);
            let mut tape = Tape::new();
            let xin = augmented_input(&mut tape, input, d)?;
            let ev = value_eval(model, &env.terminal, env.horizon, &mut tape, xin, true)?;
            let h = head(env, &tape, ev.phi, xs);
            let mut losses = PhiLosses::default();
            let mut w = vec![0.0; n];
            let phi0 = tape.values(ev.phi);
            for j in 0..n {
                let r = h.q[j] + f[lo + j];
                losses.l0 += phi0[[0, n + j]] * inv_b;
                losses.lt += h.q[j] * inv_b;
                losses.lhjb += lambda * r.abs() * inv_b;
                w[j] = -inv_b + lambda * r.signum() * if r == 0.0 { 0.0 } else { inv_b };
            }
            let grad = match model.params() {
                Some(params) => {
                    let seed = phi_seed(env, &tape, ev.phi, &w, &h.dp, Some((n, -inv_b)));
                    let grads = tape.backward(vec![(ev.phi, seed)])?;
                    params.flat_gradient(&grads, &ev.linears)
                }
                None => Vec::new(),
            };
            Ok((losses, grad))
        })
        .collect();
    let mut total = PhiLosses::default();
    let mut grad = vec![0.0; n_params];
    for part in parts {
        let (l, g) = part?;
        total.l0 += l.l0;
        total.lt += l.lt;
        total.lhjb += l.lhjb;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Generator loss `mean[d_t phi + nu lap phi - H + f]` at `G(z, t)` and its gradient
/// in the generator parameters. `partner` is the detached second batch for congestion.
pub fn generator_objective(
    model: &ValueModel,
    generator: &NetworkParams,
    env: &Environment,
    z: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    partner: Option<ArrayView2<'_, f64>>,
) -> Result<(f64, Vec<f64>)> {
    let (d, b) = z.dim();
    let inv_b = 1.0 / b as f64;
    let points = generate(generator, env.horizon, z, t)?;
    let inter = env.interaction.evaluate(points.view(), partner, true)?;
    let parts: Vec<Result<(f64, Vec<f64>)>> = chunks(b, d)
        .into_par_iter()
        .map(|(lo, hi)| {
            let n = hi - lo;
            let mut tape = Tape::new();
            let zt = tape.leaf_values(stack_time(z.slice(s![.., lo..hi]), t.slice(s![lo..hi])));
            let gen = generator_eval(generator, env.horizon, &mut tape, zt, true)?;
            let times = tape.leaf_values(t.slice(s![lo..hi]).insert_axis(ndarray::Axis(0)).to_owned());
            let joined = tape.concat(&[gen.points, times])?;
            let xin = tape.lift(joined, d)?;
            let ev = value_eval(model, &env.terminal, env.horizon, &mut tape, xin, false)?;
            let x = tape.values(gen.points).to_owned();
            let h = head(env, &tape, ev.phi, x.view());
            let InteractionEval { values: f, grad: fgrad } = &inter;
            let fgrad = fgrad.as_ref().expect("requested gradient");
            let mut loss = 0.0;
            for j in 0..n {
                loss += (h.q[j] + f[lo + j]) * inv_b;
            }
            let w = vec![inv_b; n];
            let seed_phi = phi_seed(env, &tape, ev.phi, &w, &h.dp, None);
            let mut seed_x = Array2::zeros((d, n));
            for j in 0..n {
                for k in 0..d {
                    seed_x[[k, j]] = (fgrad[[k, lo + j]] - h.dx[[k, j]]) * inv_b;
                }
            }
            let grads = tape.backward(vec![(ev.phi, seed_phi), (gen.points, seed_x)])?;
            Ok((loss, generator.flat_gradient(&grads, &gen.linears)))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; generator.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Value derivatives at arbitrary points: one [`AugState`] per column.
pub fn value_derivatives(
    model: &ValueModel,
    env: &Environment,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
) -> Result<Vec<AugState>> {
    let (d, n) = x.dim();
    let parts: Vec<Result<Vec<AugState>>> = chunks(n, d)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut tape = Tape::new();
            let xin = augmented_input(
                &mut tape,
                stack_time(x.slice(s![.., lo..hi]), t.slice(s![lo..hi])),
                d,
            )?;
            let ev = value_eval(model, &env.terminal, env.horizon, &mut tape, xin, false)?;
            Ok((0..hi - lo).map(|j| tape.aug_state(ev.phi, 0, j)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Values of `phi` only, without derivative propagation.
pub fn value_values(
    model: &ValueModel,
    env: &Environment,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
) -> Result<Vec<f64>> {
    let (d, n) = x.dim();
    let parts: Vec<Result<Vec<f64>>> = chunks(n, 0)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut tape = Tape::new();
            let xin = tape.leaf_values(stack_time(x.slice(s![.., lo..hi]), t.slice(s![lo..hi])));
            let ev = value_eval(model, &env.terminal, env.horizon, &mut tape, xin, false)?;
            Ok(tape.values(ev.phi).row(0).to_vec())
        })
        .collect();
    let _ = d;
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Run-level training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lambda: f64,
    pub lr_phi: f64,
    pub lr_gen: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub skip_weight: f64,
    pub monitor_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 50,
            lambda: 1.0,
            lr_phi: 4e-4,
            lr_gen: 1e-4,
            betas: (0.5, 0.9),
            weight_decay: 1e-4,
            width: 100,
            hidden_layers: 3,
            skip_weight: 0.5,
            monitor_size: 4096,
            seed: 0,
        }
    }
}

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const TRAINING: u64 = 0;
    pub const MONITOR: u64 = 1;
    pub const VALUE_INIT: u64 = 2;
    pub const GENERATOR_INIT: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const EXPORT: u64 = 5;

    pub fn seed(seed: u64, stream: u64) -> u64 {
        seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed points on which the residual is monitored.
#[derive(Debug, Clone)]
pub struct MonitorBatch {
    pub z: Array2<f64>,
    pub t: Array1<f64>,
    pub partner: Option<Array2<f64>>,
}

impl MonitorBatch {
    pub fn new(env: &Environment, size: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, streams::MONITOR);
        let BatchSample { z, t } = env.sample_batch(size, &mut rng)?;
        let partner = env
            .interaction
            .needs_partner()
            .then(|| env.rho0.sample(size, &mut rng));
        Ok(MonitorBatch { z, t, partner })
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub value: ValueModel,
    pub value_adam: AdamState,
    pub generator: NetworkParams,
    pub generator_adam: AdamState,
    pub iteration: u64,
    pub settings: TrainSettings,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(env: &Environment, settings: TrainSettings) -> Self {
        let d = env.dim;
        let vcfg = ResNetConfig::value(d).with_width(settings.width, settings.hidden_layers);
        let gcfg = ResNetConfig::generator(d).with_width(settings.width, settings.hidden_layers);
        let vcfg = ResNetConfig {
            skip_weight: settings.skip_weight,
            ..vcfg
        };
        let gcfg = ResNetConfig {
            skip_weight: settings.skip_weight,
            ..gcfg
        };
        let value = init_params(&vcfg, Role::Value, streams::seed(settings.seed, streams::VALUE_INIT));
        let generator = init_params(&gcfg, Role::Generator, streams::seed(settings.seed, streams::GENERATOR_INIT));
        Self::from_parts(ValueModel::Network(value), generator, settings)
    }

    pub fn from_parts(value: ValueModel, generator: NetworkParams, settings: TrainSettings) -> Self {
        let adam = |lr: f64, n: usize| {
            AdamState::new(
                AdamConfig {
                    lr,
                    beta1: settings.betas.0,
                    beta2: settings.betas.1,
                    weight_decay: settings.weight_decay,
                    eps: 1e-8,
                },
                n,
            )
        };
        let value_adam = adam(settings.lr_phi, value.params().map_or(0, NetworkParams::len));
        let generator_adam = adam(settings.lr_gen, generator.len());
        let rng = stream_rng(settings.seed, streams::TRAINING);
        TrainerState {
            value,
            value_adam,
            generator,
            generator_adam,
            iteration: 0,
            settings,
            rng,
        }
    }

    fn partner(&mut self, env: &Environment, t: ArrayView1<'_, f64>) -> Result<Option<Array2<f64>>> {
        if !env.interaction.needs_partner() {
            return Ok(None);
        }
        let y = env.rho0.sample(t.len(), &mut self.rng);
        Ok(Some(generate(&self.generator, env.horizon, y.view(), t)?))
    }
}

fn check_finite(what: &'static str, iteration: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            iteration,
            value,
        })
    }
}

/// One value-network update. Returns the loss components before the update.
pub fn phi_step(state: &mut TrainerState, env: &Environment) -> Result<PhiLosses> {
    let batch = env.sample_batch(state.settings.batch_size, &mut state.rng)?;
    let x = generate(&state.generator, env.horizon, batch.z.view(), batch.t.view())?;
    let partner = state.partner(env, batch.t.view())?;
    let f = env.interaction.evaluate(x.view(), partner.as_ref().map(|p| p.view()), false)?;
    let (losses, grad) = phi_objective(
        &state.value,
        env,
        x.view(),
        batch.t.view(),
        &f.values,
        state.settings.lambda,
    )?;
    check_finite("l0", state.iteration, losses.l0)?;
    check_finite("lt", state.iteration, losses.lt)?;
    check_finite("lhjb", state.iteration, losses.lhjb)?;
    if let Some(params) = state.value.params_mut() {
        adam_step(&mut state.value_adam, params.as_mut_slice(), &grad)?;
    }
    Ok(losses)
}

/// One generator update. Returns the generator loss before the update.
pub fn generator_step(state: &mut TrainerState, env: &Environment) -> Result<f64> {
    let batch = env.sample_batch(state.settings.batch_size, &mut state.rng)?;
    let partner = state.partner(env, batch.t.view())?;
    let (loss, grad) = generator_objective(
        &state.value,
        &state.generator,
        env,
        batch.z.view(),
        batch.t.view(),
        partner.as_ref().map(|p| p.view()),
    )?;
    check_finite("generator lt", state.iteration, loss)?;
    adam_step(&mut state.generator_adam, state.generator.as_mut_slice(), &grad)?;
    Ok(loss)
}

/// Residuals `d_t phi + nu lap phi - H + f` at `G(z, t)`.
pub fn residuals_at(
    model: &ValueModel,
    generator: &NetworkParams,
    env: &Environment,
    z: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    partner_z: Option<ArrayView2<'_, f64>>,
) -> Result<Vec<f64>> {
    let x = generate(generator, env.horizon, z, t)?;
    let partner = match partner_z {
        Some(pz) => Some(generate(generator, env.horizon, pz, t)?),
        None => None,
    };
    let f = env.interaction.evaluate(x.view(), partner.as_ref().map(|p| p.view()), false)?;
    let states = value_derivatives(model, env, x.view(), t)?;
    Ok(states
        .iter()
        .enumerate()
        .map(|(j, st)| {
            let xj: Vec<f64> = x.column(j).to_vec();
            hjb_residual(env, &xj, st, f.values[j])
        })
        .collect())
}

/// Mean absolute residual on the monitor batch.
pub fn monitor_residual(state: &TrainerState, env: &Environment, monitor: &MonitorBatch) -> Result<f64> {
    let r = residuals_at(
        &state.value,
        &state.generator,
        env,
        monitor.z.view(),
        monitor.t.view(),
        monitor.partner.as_ref().map(|p| p.view()),
    )?;
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
}

/// Relative errors against the closed-form solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub rel_error_phi: f64,
    pub rel_error_rho: f64,
    pub points: usize,
}

/// Compares a trained pair against the closed-form solution.
#[derive(Debug, Clone)]
pub struct Validator {
    pub solution: AnalyticSolution,
    pub points: ValidationPoints,
    pub mode: ValidationMode,
    /// Latent samples pushed through the generator for the density estimate.
    pub latent: Array2<f64>,
}

impl Validator {
    pub fn new(solution: AnalyticSolution, env: &Environment, seed: u64) -> Result<Self> {
        let mode = if solution.dim == 2 {
            ValidationMode::Grid2d
        } else {
            ValidationMode::Samples
        };
        let vseed = streams::seed(seed, streams::VALIDATION);
        let points = build_validation_points(&solution, mode, env.horizon, vseed)?;
        let mut rng = stream_rng(vseed, streams::VALIDATION);
        let latent = env.rho0.sample(crate::validation::VALIDATION_SAMPLES, &mut rng);
        Ok(Validator {
            solution,
            points,
            mode,
            latent,
        })
    }

    pub fn phi_error(&self, model: &ValueModel, env: &Environment) -> Result<f64> {
        let pred = value_values(model, env, self.points.x.view(), self.points.t.view())?;
        let truth: Vec<f64> = (0..self.points.len())
            .map(|j| {
                let x: Vec<f64> = self.points.x.column(j).to_vec();
                self.solution.phi(&x, self.points.t[j])
            })
            .collect();
        relative_error(&pred, &truth)
    }

    /// Kernel density estimates of the generated clouds at `GRID_TIMES` instants,
    /// compared at the validation points (each assigned the nearest instant).
    pub fn rho_error(&self, generator: &NetworkParams, env: &Environment) -> Result<f64> {
        let slices = linspace(0.0, env.horizon, GRID_TIMES);
        let step = env.horizon / (GRID_TIMES - 1) as f64;
        let slot = |t: f64| ((t / step).round() as usize).min(GRID_TIMES - 1);
        let n = self.latent.ncols();
        let kdes: Vec<KdeEstimator> = slices
            .iter()
            .map(|&ts| {
                let times = Array1::from_elem(n, ts);
                let cloud = generate(generator, env.horizon, self.latent.view(), times.view())?;
                KdeEstimator::scott(cloud)
            })
            .collect::<Result<_>>()?;
        let idx: Vec<usize> = (0..self.points.len()).collect();
        let pred: Vec<f64> = idx
            .par_iter()
            .map(|&j| {
                let x: Vec<f64> = self.points.x.column(j).to_vec();
                kdes[slot(self.points.t[j])].density(&x)
            })
            .collect::<Result<_>>()?;
        let truth: Vec<f64> = idx
            .iter()
            .map(|&j| self.solution.rho(&self.points.x.column(j).to_vec()))
            .collect();
        relative_error(&pred, &truth)
    }

    pub fn report(&self, state: &TrainerState, env: &Environment) -> Result<ValidationReport> {
        Ok(ValidationReport {
            rel_error_phi: self.phi_error(&state.value, env)?,
            rel_error_rho: self.rho_error(&state.generator, env)?,
            points: self.points.len(),
        })
    }
}

/// One logged line of training history.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HistoryRow {
    pub iter: u64,
    pub l0: Option<f64>,
    pub lt: Option<f64>,
    pub lhjb: Option<f64>,
    pub monitor_residual: Option<f64>,
    pub rel_error_phi: Option<f64>,
    pub rel_error_rho: Option<f64>,
}

pub const HISTORY_HEADER: &str = "iter,l0,lt,lhjb,monitor_residual,rel_error_phi,rel_error_rho";

/// Reals are written with 17 significant digits; missing values as empty fields.
pub fn format_real(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            format_real(self.l0),
            format_real(self.lt),
            format_real(self.lhjb),
            format_real(self.monitor_residual),
            format_real(self.rel_error_phi),
            format_real(self.rel_error_rho),
        )
    }
}

/// Logging cadence of [`train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub iterations: u64,
    pub log_interval: u64,
    pub validate_interval: u64,
    /// Whether to log the state before the first step.
    pub initial_row: bool,
}

/// Runs `schedule.iterations` outer iterations from the current state.
///
/// A row is produced at the starting iteration, every `log_interval`
/// iterations and at the end. `on_row` sees each row as soon as it exists
/// (with the state at that moment), so callers can stream history and
/// checkpoints.
pub fn train(
    state: &mut TrainerState,
    env: &Environment,
    monitor: &MonitorBatch,
    validator: Option<&Validator>,
    schedule: Schedule,
    mut on_row: impl FnMut(&HistoryRow, &TrainerState) -> Result<()>,
) -> Result<Vec<HistoryRow>> {
    let log_every = schedule.log_interval.max(1);
    let validate_every = schedule.validate_interval.max(1);
    let start = state.iteration;
    let end = start + schedule.iterations;
    let mut rows = Vec::new();

    let mut emit = |state: &TrainerState, last: Option<PhiLosses>, rows: &mut Vec<HistoryRow>| -> Result<()> {
        let it = state.iteration;
        let mut row = HistoryRow {
            iter: it,
            l0: last.map(|l| l.l0),
            lt: last.map(|l| l.lt),
            lhjb: last.map(|l| l.lhjb),
            monitor_residual: Some(monitor_residual(state, env, monitor)?),
            ..Default::default()
        };
        if let Some(v) = validator {
            if it.is_multiple_of(validate_every) || it == end {
                let rep = v.report(state, env)?;
                row.rel_error_phi = Some(rep.rel_error_phi);
                row.rel_error_rho = Some(rep.rel_error_rho);
            }
        }
        on_row(&row, state)?;
        rows.push(row);
        Ok(())
    };

    if schedule.initial_row {
        emit(state, None, &mut rows)?;
    }
    while state.iteration < end {
        let losses = phi_step(state, env)?;
        generator_step(state, env)?;
        state.iteration += 1;
        if state.iteration.is_multiple_of(log_every) || state.iteration == end {
            emit(state, Some(losses), &mut rows)?;
        }
    }
    Ok(rows)
}
