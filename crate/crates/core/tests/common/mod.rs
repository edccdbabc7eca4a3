//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mfgnet_core::config::RunConfig;
use mfgnet_core::environments::Environment;
use mfgnet_core::networks::{init_params, NetworkParams, ResNetConfig, Role, ValueModel};
use mfgnet_core::trainer::value_values;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn env(experiment: &str, dim: usize, nu: f64) -> Environment {
    RunConfig::from_toml_str(&format!("experiment = \"{experiment}\"\ndim = {dim}\nnu = {nu}\n"))
        .unwrap()
        .environment()
        .unwrap()
}

/// A value network with Gaussian noise added to every parameter, so it sits
/// away from its symmetric initial point.
pub fn random_value_net(dim: usize, width: usize, seed: u64) -> ValueModel {
    let cfg = ResNetConfig::value(dim).with_width(width, 3);
    let mut p = init_params(&cfg, Role::Value, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in p.as_mut_slice() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    ValueModel::Network(p)
}

pub fn phi_at(model: &ValueModel, env: &Environment, x: &[f64], t: f64) -> f64 {
    let xs = Array2::from_shape_vec((x.len(), 1), x.to_vec()).unwrap();
    value_values(model, env, xs.view(), Array1::from_elem(1, t).view()).unwrap()[0]
}

/// Fourth-order central first difference of `f` at 0.
pub fn d1(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Fourth-order central second difference of `f` at 0.
pub fn d2(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h)
}

/// Derivative of `eval` in one flat coordinate of `params`.
pub fn flat_fd(params: &[f64], idx: usize, h: f64, eval: impl Fn(&[f64]) -> f64) -> f64 {
    d1(
        |delta| {
            let mut q = params.to_vec();
            q[idx] += delta;
            eval(&q)
        },
        h,
    )
}

/// Literal right-hand side of the first-order quadrotor system.
pub fn quad_dynamics(x: &[f64], u: [f64; 4], m: f64, g: f64) -> [f64; 12] {
    let (psi, theta, phi) = (x[6], x[8], x[10]);
    let thrust = u[0] / m;
    [
        x[1],
        thrust * (phi.sin() * psi.sin() + phi.cos() * psi.cos() * theta.sin()),
        x[3],
        thrust * (-psi.cos() * phi.sin() + phi.cos() * theta.sin() * psi.sin()),
        x[5],
        thrust * theta.cos() * phi.cos() - g,
        x[7],
        u[1],
        x[9],
        u[2],
        x[11],
        u[3],
    ]
}

fn control_objective(x: &[f64], p: &[f64], u: [f64; 4]) -> f64 {
    let h = quad_dynamics(x, u, 0.5, 9.81);
    -p.iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>() - 0.5 * u.iter().map(|v| v * v).sum::<f64>()
}

/// `sup_u -<p, h(x, u)> - |u|^2/2`: integer grid over `[-20, 20]^4`, then
/// repeated 3^4 local grids with a shrinking step.
pub fn brute_force_sup(x: &[f64], p: &[f64]) -> f64 {
    let mut best = ([0.0; 4], f64::NEG_INFINITY);
    let coarse: Vec<f64> = (0..=40).map(|i| -20.0 + i as f64).collect();
    for &a in &coarse {
        for &b in &coarse {
            for &c in &coarse {
                for &d in &coarse {
                    let u = [a, b, c, d];
                    let v = control_objective(x, p, u);
                    if v > best.1 {
                        best = (u, v);
                    }
                }
            }
        }
    }
    let mut step = 1.0;
    while step > 1e-7 {
        let centre = best.0;
        let mut improved = false;
        for i in 0..81 {
            let mut u = centre;
            let mut k = i;
            for slot in u.iter_mut() {
                *slot += step * ((k % 3) as f64 - 1.0);
                k /= 3;
            }
            let v = control_objective(x, p, u);
            if v > best.1 {
                best = (u, v);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best.1
}

/// Copy of `p` holding the flat parameters `q`.
pub fn with_flat(p: &NetworkParams, q: &[f64]) -> NetworkParams {
    let mut c = p.clone();
    c.as_mut_slice().copy_from_slice(q);
    c
}
