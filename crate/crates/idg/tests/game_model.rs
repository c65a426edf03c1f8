//! Game model, strategies and validation.

mod common;

use approx::assert_abs_diff_eq;
use common::{col, errorfree, vec_of};
use idg::expr::{parse, Expr, ExprMat};
use idg::game::{eval_strategies, strategy_from_value, validate, DomainBox, Dynamics, GameError};
use nalgebra::dvector;
use proptest::prelude::*;

fn g1() -> ExprMat {
    col(&["0", "cos(2*x1) + 2"])
}

fn g2() -> ExprMat {
    col(&["0", "sin(4*x1^2) + 2"])
}

#[test]
fn zero_value_gives_zero_strategy() {
    let mu = strategy_from_value(&Expr::zero(), &[2.0], &g1()).unwrap();
    assert_eq!(mu.eval(&[1.3, -0.7]).unwrap()[0], 0.0);
}

#[test]
fn player_one_strategy_matches_hand_derivation() {
    let v = parse("0.5*x1^2 + x2^2").unwrap();
    let mu = strategy_from_value(&v, &[2.0], &g1()).unwrap();
    let oracle = parse("-0.5*x2*(cos(2*x1) + 2)").unwrap();
    for x in [[0.3, -1.2], [2.0, 0.5], [-1.0, 3.0]] {
        assert_abs_diff_eq!(mu.eval(&x).unwrap()[0], oracle.eval(&x).unwrap(), epsilon = 1e-14);
    }
}

#[test]
fn strategy_scales_with_inverse_weight() {
    // r = 2 on V = ¼x1² + ½x2² gives −¼·x2·(sin(4x1²)+2)
    let v = parse("0.25*x1^2 + 0.5*x2^2").unwrap();
    let mu = strategy_from_value(&v, &[2.0], &g2()).unwrap();
    let oracle = parse("-0.25*x2*(sin(4*x1^2) + 2)").unwrap();
    // the bundled game uses r = 1 for player 2
    let mu1 = strategy_from_value(&v, &[1.0], &g2()).unwrap();
    let oracle1 = parse("-0.5*x2*(sin(4*x1^2) + 2)").unwrap();
    for x in [[0.3, -1.2], [2.0, 0.5], [-1.0, 3.0]] {
        assert_abs_diff_eq!(mu.eval(&x).unwrap()[0], oracle.eval(&x).unwrap(), epsilon = 1e-14);
        assert_abs_diff_eq!(mu1.eval(&x).unwrap()[0], oracle1.eval(&x).unwrap(), epsilon = 1e-14);
    }
}

#[test]
fn nonpositive_weight_is_rejected() {
    let v = parse("x2^2").unwrap();
    assert!(matches!(strategy_from_value(&v, &[0.0], &g1()), Err(GameError::NonPositiveWeight { .. })));
    assert!(matches!(strategy_from_value(&v, &[-1.0], &g1()), Err(GameError::NonPositiveWeight { .. })));
    assert!(matches!(strategy_from_value(&v, &[1.0, 1.0], &g1()), Err(GameError::Dimension(_))));
}

#[test]
fn gt_model_validates() {
    let sc = errorfree();
    let d = validate(&sc.model);
    assert!(d.all_passed(), "{:?}", d.failures().collect::<Vec<_>>());
    let gt = sc.model.gt_strategies().unwrap();
    assert_eq!(eval_strategies(&gt, &[0.0, 0.0]).unwrap().amax(), 0.0);
    // Q1 = 2(x1² + x2²): smallest off-origin grid value is 2
    let q_check = d.checks.iter().find(|c| c.name == "Q positive on grid" && c.player == Some(0)).unwrap();
    assert!(q_check.passed);
}

#[test]
fn indefinite_cost_fails_soft_check() {
    let mut model = errorfree().model;
    model.players[0].beta = dvector![-1.0, 0.0, 0.0];
    let d = validate(&model);
    assert!(!d.all_passed());
    assert!(!d.hard_failure());
    let bad: Vec<_> = d.failures().map(|c| c.name.clone()).collect();
    assert_eq!(bad, vec!["Q positive on grid".to_string()]);
}

#[test]
fn zero_control_weight_is_a_hard_failure() {
    let mut model = errorfree().model;
    model.players[0].alpha = dvector![0.0, 2.0];
    let d = validate(&model);
    assert!(d.hard_failure());
}

#[test]
fn dynamics_dimension_checks() {
    assert!(Dynamics::new(vec_of(&["x1", "x2"]), vec![col(&["1"])]).is_err());
    assert!(Dynamics::new(vec_of(&["x3"]), vec![col(&["1"])]).is_err());
    let d = Dynamics::new(vec_of(&["-x1", "x1 - x2"]), vec![col(&["0", "1"]), col(&["1", "0"])]).unwrap();
    assert_eq!((d.players(), d.p_total(), d.offset(1)), (2, 2, 1));
    let rhs = d.rhs(&[1.0, 2.0], &dvector![10.0, 100.0]).unwrap();
    assert_eq!(rhs, dvector![-1.0 + 100.0, -1.0 + 10.0]);
}

#[test]
fn grid_matches_declared_box() {
    let b = DomainBox { lower: vec![-10.0, -10.0], upper: vec![10.0, 10.0], step: vec![1.0, 1.0] };
    let g = b.grid();
    assert_eq!(g.len(), 441);
    assert_eq!(g[0], vec![-10.0, -10.0]);
    assert_eq!(g[1], vec![-10.0, -9.0]);
    assert_eq!(g[440], vec![10.0, 10.0]);
    assert!(g.contains(&vec![0.0, 0.0]));
    let bad = DomainBox { lower: vec![1.0], upper: vec![2.0], step: vec![0.5] };
    assert!(bad.check().is_err());
}

proptest! {
    #[test]
    fn strategies_are_invariant_to_joint_scaling(k in 0.01f64..100.0, x1 in -3.0f64..3.0, x2 in -3.0f64..3.0) {
        let sc = errorfree();
        for (i, pl) in sc.model.players.iter().enumerate() {
            let theta = pl.theta.as_ref().unwrap();
            let r = sc.model.r_ii(i);
            let g = &sc.model.dynamics.g[i];
            let base = strategy_from_value(&pl.phi.dot(theta.as_slice()), &r, g).unwrap();
            let scaled_theta: Vec<f64> = theta.iter().map(|t| t * k).collect();
            let scaled_r: Vec<f64> = r.iter().map(|v| v * k).collect();
            let scaled = strategy_from_value(&pl.phi.dot(&scaled_theta), &scaled_r, g).unwrap();
            let a = base.eval(&[x1, x2]).unwrap()[0];
            let b = scaled.eval(&[x1, x2]).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
