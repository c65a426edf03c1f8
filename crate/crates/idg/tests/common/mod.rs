//! Shared builders for integration tests.
#![allow(dead_code)]

use idg::expr::{parse, ExprMat, ExprVec};
use idg::game::{DomainBox, Dynamics, GameModel, GroundTruth, PlayerModel};
use idg::scenario::{fixtures, Scenario};
use nalgebra::DVector;

pub fn errorfree() -> Scenario {
    Scenario::from_json(fixtures::ERROR_FREE, &[]).unwrap()
}

pub fn value_error() -> Scenario {
    Scenario::from_json(fixtures::VALUE_ERROR, &[]).unwrap()
}

pub fn cost_error() -> Scenario {
    Scenario::from_json(fixtures::COST_ERROR, &[]).unwrap()
}

pub fn vec_of(src: &[&str]) -> ExprVec {
    ExprVec::parse_all(src).unwrap()
}

pub fn col(src: &[&str]) -> ExprMat {
    let rows: Vec<Vec<&str>> = src.iter().map(|s| vec![*s]).collect();
    ExprMat::parse_rows(&rows).unwrap()
}

/// `ẋ = a x + b u` with cost `q x² + r u²` and `φ = [x²]`.
pub fn scalar_lq(a: f64, b: f64, q: f64, r: f64) -> GameModel {
    let dynamics = Dynamics::new(vec_of(&[&format!("{a}*x1")]), vec![col(&[&format!("{b}")])]).unwrap();
    GameModel {
        dynamics,
        players: vec![PlayerModel {
            phi: vec_of(&["x1^2"]),
            psi: vec_of(&["x1^2"]),
            alpha: DVector::from_vec(vec![r]),
            beta: DVector::from_vec(vec![q]),
            theta: None,
        }],
        domain: DomainBox { lower: vec![-2.0], upper: vec![2.0], step: vec![0.25] },
        truth: GroundTruth::Parameters,
    }
}

pub fn linear_strategy(gain: f64) -> Vec<ExprVec> {
    vec![ExprVec::new(vec![parse(&format!("{}*x1", -gain)).unwrap()])]
}
