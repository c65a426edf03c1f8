//! Policy evaluation and iteration against closed-form oracles.

mod common;

use approx::assert_abs_diff_eq;
use common::{errorfree, linear_strategy, scalar_lq, vec_of};
use idg::expr::parse;
use idg::forward::{hjb_residual, policy_evaluate, policy_improve, solve_fne_pi, ForwardError, PiOptions};
use nalgebra::{dvector, DVector};
use proptest::prelude::*;

#[test]
fn zero_cost_gives_zero_weights() {
    let model = scalar_lq(-1.0, 1.0, 0.0, 1.0);
    let grid = model.domain.grid();
    let ev = policy_evaluate(&model, &linear_strategy(0.0), &grid, 1e-8).unwrap();
    assert_eq!(ev[0].theta, vec![0.0]);
}

fn lyapunov_oracle(a: f64, b: f64, q: f64, r: f64, k: f64) -> f64 {
    (q + r * k * k) / (2.0 * (b * k - a))
}

#[test]
fn scalar_policy_evaluation_matches_closed_form() {
    for (a, b, q, r, k) in [(1.0, 1.0, 1.0, 1.0, 3.0), (-0.5, 2.0, 3.0, 0.5, 0.1), (0.2, -1.0, 1.0, 2.0, -1.5)] {
        let model = scalar_lq(a, b, q, r);
        let ev = policy_evaluate(&model, &linear_strategy(k), &model.domain.grid(), 1e-8).unwrap();
        assert_abs_diff_eq!(ev[0].theta[0], lyapunov_oracle(a, b, q, r, k), epsilon = 1e-8);
        assert!(ev[0].max_residual <= 1e-10);
    }
}

fn riccati(a: f64, b: f64, q: f64, r: f64) -> f64 {
    // 0 = q + 2 a p − b² p² / r, stabilizing root
    r * (a + (a * a + b * b * q / r).sqrt()) / (b * b)
}

#[test]
fn scalar_policy_iteration_matches_riccati() {
    for (a, b, q, r, k0) in [(1.0, 1.0, 1.0, 1.0, 3.0), (-2.0, 0.5, 4.0, 1.0, 0.0), (0.5, 2.0, 1.0, 3.0, 1.0)] {
        let model = scalar_lq(a, b, q, r);
        let out = solve_fne_pi(&model, linear_strategy(k0), PiOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.state.thetas[0][0] - riccati(a, b, q, r)).abs() <= 1e-6, "{a} {b} {q} {r}");
        // history records changes between consecutive sweeps only
        assert_eq!(out.history.len(), out.state.iteration - 1);
        assert!(out.history.iter().all(|h| h.is_finite() && *h >= 0.0));
    }
}

#[test]
fn gt_strategies_evaluate_to_gt_weights() {
    let model = errorfree().model;
    let gt = model.gt_strategies().unwrap();
    let ev = policy_evaluate(&model, &gt, &model.domain.grid(), 1e-8).unwrap();
    let want = [[0.5, 0.0, 1.0], [0.25, 0.0, 0.5]];
    for (e, w) in ev.iter().zip(want) {
        for (a, b) in e.theta.iter().zip(w) {
            assert!((a - b).abs() <= 1e-3, "{:?}", e.theta);
        }
        assert_eq!(e.rank, 3);
    }
}

#[test]
fn pi_from_gt_is_a_fixed_point() {
    let model = errorfree().model;
    let opts = PiOptions::default();
    let out = solve_fne_pi(&model, model.gt_strategies().unwrap(), opts).unwrap();
    assert!(out.converged);
    assert!(out.state.iteration <= 2, "{} sweeps", out.state.iteration);
    assert!(out.state.last_change <= opts.tol);
    for (t, w) in out.state.thetas.iter().zip([dvector![0.5, 0.0, 1.0], dvector![0.25, 0.0, 0.5]]) {
        assert!((t - w).amax() <= 1e-3);
    }
    // grid HJB residual at the fixed point, relative to the cost scale on the grid (Q up to 400)
    let res = hjb_residual(&model, &out.state.thetas, &model.domain.grid()).unwrap();
    assert!(res <= 10.0 * opts.tol * 400.0, "residual {res}");
}

#[test]
fn improvement_examples() {
    let model = errorfree().model;
    let zero = policy_improve(&model, &[DVector::zeros(3), DVector::zeros(3)]).unwrap();
    assert_eq!(zero[0].eval(&[1.0, 2.0]).unwrap()[0], 0.0);
    let mu = policy_improve(&model, &[dvector![0.5, 0.0, 1.0], dvector![0.25, 0.0, 0.5]]).unwrap();
    let oracle = parse("-0.5*x2*(cos(2*x1) + 2)").unwrap();
    for x in [[0.2, 1.0], [-2.0, 0.3]] {
        assert_abs_diff_eq!(mu[0].eval(&x).unwrap()[0], oracle.eval(&x).unwrap(), epsilon = 1e-14);
    }
}

#[test]
fn dependent_basis_reports_rank_collapse() {
    let mut model = scalar_lq(-1.0, 1.0, 1.0, 1.0);
    model.players[0].phi = vec_of(&["x1^2", "2*x1^2"]);
    let err = policy_evaluate(&model, &linear_strategy(1.0), &model.domain.grid(), 1e-8).unwrap_err();
    assert!(matches!(err, ForwardError::RankCollapse { rank: 1, cols: 2, .. }));
}

proptest! {
    #[test]
    fn joint_scaling_leaves_improved_strategies_unchanged(k in 0.05f64..20.0, x1 in -3.0f64..3.0, x2 in -3.0f64..3.0) {
        let mut model = errorfree().model;
        let thetas = [dvector![0.5, 0.0, 1.0], dvector![0.25, 0.0, 0.5]];
        let base = policy_improve(&model, &thetas).unwrap();
        for pl in &mut model.players {
            pl.alpha *= k;
        }
        let scaled: Vec<DVector<f64>> = thetas.iter().map(|t| t * k).collect();
        let mu = policy_improve(&model, &scaled).unwrap();
        for (a, b) in base.iter().zip(&mu) {
            let (a, b) = (a.eval(&[x1, x2]).unwrap()[0], b.eval(&[x1, x2]).unwrap()[0]);
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
