//! Parser, evaluator and symbolic derivative checks.

use approx::assert_abs_diff_eq;
use idg::expr::{jacobian, parse, Expr, ExprError, ExprVec};
use idg::scenario::{fixtures, ScenarioFile};
use proptest::prelude::*;

fn ev(src: &str, x: &[f64]) -> f64 {
    parse(src).unwrap().eval(x).unwrap()
}

fn central_diff(e: &Expr, x: &[f64], v: usize) -> f64 {
    let step = 1e-6;
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[v] += step;
    b[v] -= step;
    (e.eval(&a).unwrap() - e.eval(&b).unwrap()) / (2.0 * step)
}

#[test]
fn parse_examples() {
    assert_eq!(ev("cos(2*x1)+2", &[0.0]), 3.0);
    assert_eq!(ev("sin(4*x1^2)+2", &[0.0]), 2.0);
    let f2 = "-x2 - 0.5*x1 + 0.25*x2*((cos(2*x1)+2)^2 + (sin(4*x1^2)+2)^2)";
    // hand value: -1 + 0.25 * (9 + 4)
    assert_abs_diff_eq!(ev(f2, &[0.0, 1.0]), 2.25, epsilon = 1e-15);
}

#[test]
fn eval_examples() {
    assert_eq!(ev("5", &[1.0, 2.0]), 5.0);
    assert_eq!(ev("x1*x2", &[3.0, 1.0]), 3.0);
    assert_eq!(ev("x1^2", &[-3.0, 7.0]), 9.0);
}

#[test]
fn precedence_and_associativity() {
    assert_eq!(ev("2^3^2", &[]), 512.0);
    assert_eq!(ev("-2^2", &[]), -4.0);
    assert_eq!(ev("8/4/2", &[]), 1.0);
    assert_eq!(ev("10-4-3", &[]), 3.0);
    assert_eq!(ev("2*3+4*5", &[]), 26.0);
    assert_eq!(ev("2^-1", &[]), 0.5);
    assert_abs_diff_eq!(ev("pi", &[]), std::f64::consts::PI);
}

#[test]
fn parse_errors() {
    assert!(matches!(parse("x1 +"), Err(ExprError::Syntax { .. })));
    assert!(matches!(parse("(x1"), Err(ExprError::Syntax { .. })));
    assert!(matches!(parse("foo(x1)"), Err(ExprError::UnknownIdent { .. })));
    assert!(matches!(parse("y"), Err(ExprError::UnknownIdent { .. })));
    assert!(matches!(parse("x0"), Err(ExprError::UnknownIdent { .. })));
    assert!(matches!(parse("sin(x1, x2)"), Err(ExprError::Arity { .. })));
    match parse("x1 + * 2") {
        Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn domain_errors() {
    assert!(matches!(parse("1/x1").unwrap().eval(&[0.0]), Err(ExprError::Domain(_))));
    assert!(matches!(parse("sqrt(x1)").unwrap().eval(&[-1.0]), Err(ExprError::Domain(_))));
    assert!(matches!(parse("x2").unwrap().eval(&[1.0]), Err(ExprError::VarOutOfRange { .. })));
}

#[test]
fn derivative_examples() {
    let d = parse("x1*x2").unwrap().diff(0).unwrap();
    assert_eq!(d.eval(&[0.3, 1.7]).unwrap(), 1.7);
    let e = parse("sin(4*x1^2)").unwrap();
    let d = e.diff(0).unwrap();
    let oracle = parse("8*x1*cos(4*x1^2)").unwrap();
    for x in [-1.3, 0.0, 0.4, 2.2] {
        assert_abs_diff_eq!(d.eval(&[x]).unwrap(), oracle.eval(&[x]).unwrap(), epsilon = 1e-12);
    }
    let e = parse("0.5*sin(x2^2)").unwrap();
    let d = e.diff(1).unwrap().eval(&[0.0, 1.0]).unwrap();
    assert_abs_diff_eq!(d, 1f64.cos(), epsilon = 1e-12);
    assert_abs_diff_eq!(d, central_diff(&e, &[0.0, 1.0], 1), epsilon = 1e-8);
}

#[test]
fn abs_and_variable_exponent_are_not_differentiable() {
    assert!(matches!(parse("abs(x1)").unwrap().diff(0), Err(ExprError::NotDifferentiable(_))));
    assert!(matches!(parse("2^x1").unwrap().diff(0), Err(ExprError::NotDifferentiable(_))));
    // abs off the differentiated path is fine
    assert!(parse("abs(x2)*x1").unwrap().diff(0).is_ok());
}

#[test]
fn jacobian_examples() {
    let v = ExprVec::parse_all(&["x1^2", "x1*x2", "x2^2"]).unwrap();
    let j = jacobian(&v, 2).unwrap().eval(&[1.5, -2.0]).unwrap();
    let oracle = [[3.0, 0.0], [-2.0, 1.5], [0.0, -4.0]];
    for r in 0..3 {
        for c in 0..2 {
            assert_abs_diff_eq!(j[(r, c)], oracle[r][c], epsilon = 1e-14);
        }
    }
    let consts = ExprVec::parse_all(&["1", "pi"]).unwrap();
    assert_eq!(jacobian(&consts, 2).unwrap().eval(&[0.3, 0.4]).unwrap().amax(), 0.0);
    let s = ExprVec::parse_all(&["sin(4*x1^2)+2"]).unwrap();
    let j = jacobian(&s, 2).unwrap().eval(&[0.5, 9.0]).unwrap();
    let e = s.get(0);
    assert_abs_diff_eq!(j[(0, 0)], central_diff(e, &[0.5, 9.0], 0), epsilon = 1e-7);
    assert_abs_diff_eq!(j[(0, 0)], 4.0 * 1f64.cos(), epsilon = 1e-12);
    assert_eq!(j[(0, 1)], 0.0);
}

/// Every expression appearing in the bundled fixtures.
fn fixture_expressions() -> Vec<String> {
    let mut out = vec![];
    for (_, text) in fixtures::all() {
        let f: ScenarioFile = serde_json::from_str(text).unwrap();
        out.extend(f.dynamics.f.iter().cloned());
        for g in &f.dynamics.g {
            out.extend(g.iter().flatten().cloned());
        }
        for p in &f.players {
            out.extend(p.phi.iter().cloned());
            out.extend(p.psi.iter().cloned());
            out.extend(p.value.iter().cloned());
            out.extend(p.cost_offset.iter().cloned());
        }
    }
    out
}

#[test]
fn fixture_gradients_match_finite_differences() {
    use rand::{Rng, SeedableRng};
    let exprs = fixture_expressions();
    assert!(exprs.len() > 20);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for src in &exprs {
        let e = parse(src).unwrap();
        let grad = e.gradient(2).unwrap();
        for _ in 0..100 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            for v in 0..2 {
                let fd = central_diff(&e, &x, v);
                let sym = grad.get(v).eval(&x).unwrap();
                assert!((sym - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{src} d/dx{}: {sym} vs {fd} at {x:?}", v + 1);
            }
        }
    }
}

fn arb_expr() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (-5.0f64..5.0).prop_map(|c| format!("{c}")),
        Just("x1".to_string()),
        Just("x2".to_string()),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} * {b})")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("-{a}")),
            inner.clone().prop_map(|a| format!("({a})^2")),
        ]
    })
}

proptest! {
    #[test]
    fn print_parse_roundtrip(src in arb_expr(), x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
        let e = parse(&src).unwrap();
        let again = parse(&e.to_string()).unwrap();
        let a = e.eval(&[x1, x2]).unwrap();
        let b = again.eval(&[x1, x2]).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} -> {}: {} vs {}", src, e, a, b);
    }

    #[test]
    fn random_gradients_match_finite_differences(src in arb_expr(), x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
        let e = parse(&src).unwrap();
        for v in 0..2 {
            let fd = central_diff(&e, &[x1, x2], v);
            let sym = e.diff(v).unwrap().eval(&[x1, x2]).unwrap();
            prop_assert!((sym - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "{}: {} vs {}", src, sym, fd);
        }
    }
}
