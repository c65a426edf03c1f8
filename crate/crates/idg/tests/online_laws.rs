//! Adaptation laws, stopping metric, excitation and PE diagnostics.

mod common;

use approx::assert_abs_diff_eq;
use common::{errorfree, value_error};
use idg::game::eval_strategies;
use idg::offline::{fne_structure, identify_all, run_offline, split_basis, HjbContext, HjbMode};
use idg::online::{
    excitation, excitation_freqs, fne_adapt_step, flow_step, hjb_adapt_step, pe_diagnostic, run_online,
    stopping_metric, ExcitationSpec, Integrator, OnlineError, WindowMetric,
};
use idg::sim::{integrate_closed_loop, rk4_step, sample};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn consistent_parameters_do_not_move() {
    let m = dmatrix![1.0, 2.0; -0.5, 3.0];
    let theta = dvector![0.3, -0.2];
    let z = &m * &theta;
    for integ in [Integrator::Euler, Integrator::Zoh] {
        let mut t = theta.clone();
        flow_step(&mut t, &m, &z, 50.0, 1e-3, integ);
        assert_eq!(t, theta);
    }
}

#[test]
fn scalar_euler_step() {
    let mut t = dvector![0.0];
    flow_step(&mut t, &dmatrix![1.0], &dvector![2.0], 1.0, 0.1, Integrator::Euler);
    assert_abs_diff_eq!(t[0], 0.2, epsilon = 1e-15);
}

#[test]
fn scalar_flow_tracks_exponential() {
    let h = 1e-3;
    let mut euler = dvector![1.0];
    let mut zoh = dvector![1.0];
    let mut worst_euler: f64 = 0.0;
    let mut worst_zoh: f64 = 0.0;
    for k in 1..=3000 {
        flow_step(&mut euler, &dmatrix![1.0], &dvector![0.0], 1.0, h, Integrator::Euler);
        flow_step(&mut zoh, &dmatrix![1.0], &dvector![0.0], 1.0, h, Integrator::Zoh);
        let exact = (-(k as f64) * h).exp();
        worst_euler = worst_euler.max((euler[0] - exact).abs());
        worst_zoh = worst_zoh.max((zoh[0] - exact).abs());
    }
    assert!(worst_euler <= h, "{worst_euler}");
    assert!(worst_zoh <= 1e-12, "{worst_zoh}");
}

#[test]
fn matrix_zoh_matches_matrix_exponential() {
    // held regressor: θ(h) − θ* = exp(−r h MᵀM)(θ(0) − θ*)
    let m = dmatrix![1.0, 0.5, 0.0; 0.0, 2.0, -1.0];
    let star = dvector![0.2, -0.4, 1.0];
    let z = &m * &star;
    let mut t = DVector::zeros(3);
    let (r, h) = (3.0, 0.05);
    flow_step(&mut t, &m, &z, r, h, Integrator::Zoh);
    let a = m.transpose() * &m * (-r * h);
    // series for the matrix exponential
    let mut term = DMatrix::identity(3, 3);
    let mut expm = DMatrix::identity(3, 3);
    for k in 1..40 {
        term = &term * &a / k as f64;
        expm += &term;
    }
    let oracle = &star + expm * (DVector::zeros(3) - &star);
    assert_abs_diff_eq!(t, oracle, epsilon = 1e-12);
}

#[test]
fn fixed_point_does_not_drift_on_exact_data() {
    let sc = errorfree();
    let model = &sc.model;
    let dynm = &model.dynamics;
    let mu = model.gt_strategies().unwrap();
    let split = split_basis(&model.players[0].phi, &dynm.g[0], &model.domain.grid(), 1e-9).unwrap();
    let st = fne_structure(&model.players[0].phi, &dynm.g[0], &split).unwrap();
    let star = dvector![0.0, 0.5];
    let mut theta = star.clone();
    let mut x = dvector![3.0, 1.0];
    for _ in 0..2000 {
        let u = eval_strategies(&mu, x.as_slice()).unwrap().rows(0, 1).into_owned();
        let before = theta.clone();
        fne_adapt_step(&mut theta, &st, x.as_slice(), &u, 1e-3, 4.0, Integrator::Euler).unwrap();
        assert!((&theta - &before).norm() <= 1e-9);
        x = rk4_step(|y| idg::sim::closed_loop_rhs(dynm, &mu, y), &x, 1e-3).unwrap();
    }
}

#[test]
fn hjb_law_is_stationary_on_the_solution_set() {
    let sc = errorfree();
    let off = run_offline(&sc).unwrap();
    let demos = sample(&off.gt, sc.plan.dt).unwrap();
    let ident = identify_all(&sc, &demos).unwrap();
    let dynm = &sc.model.dynamics;
    let pl = &sc.model.players[0];
    let ctx = HjbContext::new(HjbMode::Reduced, ident[0].0.clone(), &pl.phi, &pl.psi, 2, 2, None).unwrap();
    let theta_r = DVector::from_vec(ident[0].2.theta_r.clone().unwrap());
    let eta0 = off.sets[0].element(&[0.714]);
    for x in [[1.0, -2.0], [0.5, 0.5], [-3.0, 2.0]] {
        let u = eval_strategies(&off.mu_hat, &x).unwrap();
        let mut eta = eta0.clone();
        hjb_adapt_step(&mut eta, &ctx, dynm, &x, &u, &theta_r, 1e-3, 0.5, Integrator::Zoh).unwrap();
        assert!((&eta - &eta0).norm() <= 1e-9, "{}", (&eta - &eta0).norm());
    }
    let mut eta = DVector::from_element(6, 0.3);
    let zero_u = DVector::zeros(2);
    let row = hjb_adapt_step(&mut eta, &ctx, dynm, &[0.0, 0.0], &zero_u, &theta_r, 1e-3, 5.0, Integrator::Euler).unwrap();
    assert_eq!(row.amax(), 0.0);
    assert_eq!(eta, DVector::from_element(6, 0.3));
}

fn scalars(v: &[f64]) -> Vec<DVector<f64>> {
    v.iter().map(|x| dvector![*x]).collect()
}

#[test]
fn stopping_metric_examples() {
    let h = 0.01;
    let constant = scalars(&[1.5; 201]);
    assert_abs_diff_eq!(stopping_metric(&constant, h, 1.0).unwrap(), 0.0, epsilon = 1e-15);
    // θ(τ) = τ over [t − 2T, t]: both windows differ by T·T, normalized by T
    for t_win in [0.5, 1.0, 2.0] {
        let n = (2.0 * t_win / h).round() as usize;
        let ramp: Vec<f64> = (0..=n).map(|k| 7.0 + k as f64 * h).collect();
        assert_abs_diff_eq!(stopping_metric(&scalars(&ramp), h, t_win).unwrap(), t_win, epsilon = 1e-9);
    }
    let decay = |t0: f64| -> f64 {
        let s: Vec<f64> = (0..=200).map(|k| (-(t0 + k as f64 * h)).exp()).collect();
        stopping_metric(&scalars(&s), h, 1.0).unwrap()
    };
    assert!(decay(0.0) > decay(5.0) && decay(5.0) > decay(10.0) && decay(10.0) < 1e-4);
    assert!(matches!(stopping_metric(&constant[..100], h, 1.0), Err(OnlineError::InsufficientHistory { .. })));
}

proptest! {
    #[test]
    fn running_window_matches_direct_quadrature(seed in any::<u64>(), len in 30usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 0.01;
        let window = 0.1;
        let mut w = WindowMetric::new(2, h, window).unwrap();
        let mut hist = vec![];
        for _ in 0..len {
            let v = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            w.push(&v);
            hist.push(v);
            match (w.metric(), stopping_metric(&hist, h, window)) {
                (Some(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (None, Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b.ok()),
            }
        }
    }
}

#[test]
fn excitation_is_deterministic_and_reset_dependent() {
    let spec = ExcitationSpec::default();
    assert_eq!(excitation(0.0, &spec, 42, 0, 0), 0.0);
    assert_eq!(excitation(0.37, &spec, 42, 1, 3), excitation(0.37, &spec, 42, 1, 3));
    let a = excitation_freqs(&spec, 42, 0, 0);
    let b = excitation_freqs(&spec, 42, 0, 1);
    assert_ne!(a, b);
    assert_ne!(a, excitation_freqs(&spec, 42, 1, 0));
    assert_eq!(a.len(), 3);
    assert!(a.iter().chain(&b).all(|f| (0.5..=5.0).contains(f)));

    // regenerate through the seeded stream directly
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    rng.set_stream(1u64 << 32); // reset 1, channel 0
    let oracle: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..=5.0)).collect();
    assert_eq!(b, oracle);
    let t = 0.21;
    let direct: f64 = oracle.iter().map(|f| 3.0 * (2.0 * std::f64::consts::PI * f * t).sin()).sum();
    assert_abs_diff_eq!(excitation(t, &spec, 42, 0, 1), direct, epsilon = 1e-15);
}

#[test]
fn pe_examples() {
    let h = 1e-3;
    let eye: Vec<DMatrix<f64>> = vec![DMatrix::identity(3, 3); 1001];
    let r = pe_diagnostic(&eye, h, 1e-9);
    assert_abs_diff_eq!(r.lambda_min, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.window, 1.0, epsilon = 1e-12);
    assert_eq!(r.excited_dim, 3);
    let zero: Vec<DMatrix<f64>> = vec![DMatrix::zeros(1, 4); 11];
    let r = pe_diagnostic(&zero, h, 1e-9);
    assert_eq!((r.lambda_min, r.excited_dim), (0.0, 0));
}

#[test]
fn errorfree_online_run() {
    let sc = errorfree();
    let off = run_offline(&sc).unwrap();
    let run = run_online(&sc, Some(&off)).unwrap();
    let rep = &run.report;
    assert!(rep.all_frozen && rep.failure.is_none());
    for p in &rep.players {
        assert!(p.fne_freeze.unwrap() <= 16.0 && p.hjb_freeze.unwrap() <= 16.0);
        for a in &p.alpha {
            assert!((a - 2.0).abs() <= 0.1, "{:?}", p.alpha);
        }
        let pe = p.pe.as_ref().unwrap();
        assert_eq!(pe.eigenvalues.len(), 6);
        assert_eq!(pe.excited_dim, 5);
        assert!(!p.discrepancy);
    }
    assert!(rep.forward.is_some());

    // frozen parameters never change afterward
    for player in 0..2 {
        let t_freeze = rep.players[player].fne_freeze.unwrap();
        let after: Vec<_> = run.trace.iter().filter(|r| r.player == player && r.t > t_freeze + 1e-9).collect();
        assert!(after.windows(2).all(|w| w[0].theta_bar == w[1].theta_bar));
    }
}

#[test]
fn strategy_weights_converge_exponentially() {
    let sc = errorfree();
    let run = run_online(&sc, None).unwrap();
    let t_freeze = run.report.players[0].fne_freeze.unwrap();
    let (t0, t1) = (sc.online.window, t_freeze);
    let pts: Vec<(f64, f64)> = run
        .trace
        .iter()
        .filter(|r| r.player == 0 && r.t >= t0 && r.t <= t1)
        .map(|r| (r.t, (DVector::from_vec(r.theta_bar.clone()) - dvector![0.0, 0.5]).norm().ln()))
        .collect();
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum::<f64>() / pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "slope {slope}");
}

#[test]
fn online_run_is_deterministic() {
    let sc = value_error();
    let a = run_online(&sc, None).unwrap();
    let b = run_online(&sc, None).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn config_is_checked() {
    let mut sc = errorfree();
    sc.online.tau = vec![-1.0, 1.0];
    assert!(matches!(run_online(&sc, None), Err(OnlineError::Config(_))));
    let mut sc = errorfree();
    sc.online.excitation.f_hi = 600.0;
    assert!(matches!(run_online(&sc, None), Err(OnlineError::Config(_))));
    let mut sc = errorfree();
    sc.online.kappa = vec![1.0];
    assert!(matches!(run_online(&sc, None), Err(OnlineError::Config(_))));
}

#[test]
fn gt_closed_loop_feeds_the_learner_without_excitation() {
    // plant and strategy-weight law use the true closed loop; only the HJB path sees the probing signal
    let sc = errorfree();
    let mu = sc.model.gt_strategies().unwrap();
    let tr = integrate_closed_loop(&sc.model.dynamics, &mu, &sc.plan.inits[..1], 2.0, 1e-3).unwrap();
    assert!(tr.x.iter().all(|x| x.amax() <= 3.0 + 1e-12));
}
