//! Randomized invariants.

use mfgnet_core::autodiff::{Activation, Tape};
use mfgnet_core::config::RunConfig;
use mfgnet_core::environments::{
    congestion_estimate, gaussian_congestion, hamiltonian_norm, obstacle_cost, ObstacleKind,
};
use mfgnet_core::networks::ValueModel;
use mfgnet_core::trainer::{adam_step, hjb_residual, value_derivatives, AdamConfig, AdamState};
use mfgnet_core::validation::KdeEstimator;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, flat: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), flat[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_of_squares_has_laplacian_two_d(x in prop::collection::vec(-3.0f64..3.0, 1..12)) {
        let d = x.len();
        let mut tape = Tape::new();
        let mut input = x.clone();
        input.push(0.5);
        let leaf = tape.leaf_values(Array2::from_shape_vec((d + 1, 1), input).unwrap());
        let lifted = tape.lift(leaf, d).unwrap();
        let sq = tape.mul(lifted, lifted).unwrap();
        let mut w = Array2::ones((1, d + 1));
        w[[0, d]] = 0.0;
        let sum = tape.constant(w, Array1::zeros(1));
        let phi = tape.affine(sum, sq, None).unwrap();
        prop_assert_eq!(tape.aug_state(phi, 0, 0).lap, 2.0 * d as f64);
    }

    #[test]
    fn affine_stack_has_zero_laplacian(
        d in 1usize..6,
        weights in prop::collection::vec(-2.0f64..2.0, 3 * 36),
        points in prop::collection::vec(-3.0f64..3.0, 4 * 6),
    ) {
        let width = 5;
        let mut tape = Tape::new();
        let leaf = tape.leaf_values(matrix(d + 1, 4, &points));
        let mut h = tape.lift(leaf, d).unwrap();
        let mut rows_in = d + 1;
        for (layer, chunk) in weights.chunks(36).enumerate() {
            let rows_out = if layer == 2 { 1 } else { width };
            let lin = tape.constant(matrix(rows_out, rows_in, chunk), Array1::from_elem(rows_out, 0.1));
            h = tape.affine(lin, h, None).unwrap();
            h = tape.activate(Activation::Identity, h);
            rows_in = rows_out;
        }
        prop_assert!(tape.lap_block(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothed_norm_is_within_c_eps(
        c in 0.0f64..10.0,
        eps in 1e-6f64..1e-1,
        p in prop::collection::vec(-5.0f64..5.0, 1..10),
    ) {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gap = (hamiltonian_norm(c, &p, eps) - c * norm).abs();
        prop_assert!(gap <= c * eps * (1.0 + 1e-12) + 1e-12, "gap {} > c eps {}", gap, c * eps);
    }

    #[test]
    fn obstacle_costs_are_nonnegative_and_planar(
        kind in prop::sample::select(vec![ObstacleKind::Twin, ObstacleKind::Bottleneck, ObstacleKind::Symmetric]),
        gamma in 0.0f64..30.0,
        x in prop::collection::vec(-4.0f64..4.0, 3..8),
        other in -10.0f64..10.0,
        slot in 0usize..16,
    ) {
        let base = obstacle_cost(kind, gamma, &x).unwrap();
        prop_assert!(base >= 0.0);
        let mut y = x.clone();
        let k = 2 + slot % (x.len() - 2);
        y[k] = other;
        prop_assert_eq!(obstacle_cost(kind, gamma, &y).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn congestion_is_symmetric_and_planar(
        n in 1usize..12,
        a in prop::collection::vec(-4.0f64..4.0, 4 * 12),
        b in prop::collection::vec(-4.0f64..4.0, 4 * 12),
        noise in -5.0f64..5.0,
    ) {
        let (a, b) = (matrix(4, n, &a), matrix(4, n, &b));
        let ab = congestion_estimate(a.view(), b.view()).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert_eq!(ab.to_bits(), congestion_estimate(b.view(), a.view()).unwrap().to_bits());
        let mut shifted = a.clone();
        shifted.row_mut(3).fill(noise);
        prop_assert_eq!(congestion_estimate(shifted.view(), b.view()).unwrap().to_bits(), ab.to_bits());
    }

    #[test]
    fn gaussian_congestion_is_symmetric_and_uses_positions_only(
        n in 1usize..8,
        a in prop::collection::vec(-3.0f64..3.0, 12 * 8),
        b in prop::collection::vec(-3.0f64..3.0, 12 * 8),
        noise in -5.0f64..5.0,
    ) {
        let (a, b) = (matrix(12, n, &a), matrix(12, n, &b));
        let ab = gaussian_congestion(a.view(), b.view(), 20.0).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab.to_bits(), gaussian_congestion(b.view(), a.view(), 20.0).unwrap().to_bits());
        let mut shifted = a.clone();
        for velocity_or_angle in [1, 3, 5, 6, 7, 8, 9, 10, 11] {
            shifted.row_mut(velocity_or_angle).fill(noise);
        }
        prop_assert_eq!(gaussian_congestion(shifted.view(), b.view(), 20.0).unwrap().to_bits(), ab.to_bits());
    }

    #[test]
    fn adam_with_zero_gradient_and_no_decay_is_identity(
        params in prop::collection::vec(-10.0f64..10.0, 1..50),
        lr in 1e-6f64..1.0,
    ) {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::new(lr) };
        let mut adam = AdamState::new(cfg, params.len());
        let mut p = params.clone();
        adam_step(&mut adam, &mut p, &vec![0.0; params.len()]).unwrap();
        prop_assert_eq!(p, params);
    }

    #[test]
    fn adam_second_moment_stays_nonnegative(
        grads in prop::collection::vec(-100.0f64..100.0, 5 * 8),
    ) {
        let mut adam = AdamState::new(AdamConfig::new(1e-3), 8);
        let mut p = vec![0.3; 8];
        for g in grads.chunks(8) {
            adam_step(&mut adam, &mut p, g).unwrap();
            prop_assert!(adam.v.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn kde_is_nonnegative_with_scott_bandwidth(
        d in 1usize..4,
        b in 2usize..64,
        samples in prop::collection::vec(-3.0f64..3.0, 3 * 64),
        q in prop::collection::vec(-6.0f64..6.0, 3),
    ) {
        let kde = KdeEstimator::new(matrix(d, b, &samples), 0.7).unwrap();
        prop_assert_eq!(kde.bandwidth(), (b as f64).powf(-1.0 / (d as f64 + 4.0)));
        let rho = kde.density(&q[..d]).unwrap();
        prop_assert!(rho >= 0.0 && rho.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_form_solves_the_hjb_equation(
        gamma in 0.0f64..1.0,
        nu in 0.1f64..2.0,
        beta in 0.1f64..2.0,
        dim in 2usize..6,
        raw in prop::collection::vec(-2.0f64..2.0, 6),
        t in 0.0f64..1.0,
    ) {
        let cfg = RunConfig::from_toml_str(&format!(
            "experiment = \"analytic\"\ndim = {dim}\nnu = {nu}\ngamma = {gamma}\nbeta = {beta}\n"
        ))
        .unwrap();
        let env = cfg.environment().unwrap();
        let sol = cfg.analytic_solution().unwrap().unwrap();
        prop_assert!(sol.alpha > 0.0);
        let x = raw[..dim].to_vec();
        let xs = Array2::from_shape_vec((dim, 1), x.clone()).unwrap();
        let model = ValueModel::ClosedForm { alpha: sol.alpha };
        let st = &value_derivatives(&model, &env, xs.view(), Array1::from_elem(1, t).view()).unwrap()[0];
        let r = hjb_residual(&env, &x, st, gamma * sol.rho(&x).ln());
        prop_assert!(r.abs() < 1e-10, "r = {}", r);
    }
}
