//! Policy iteration for the forward game on a state grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::expr::{jacobian, ExprError, ExprMat, ExprVec};
use crate::game::{eval_strategies, strategy_from_value, GameError, GameModel};
use crate::linalg::{lstsq_min_norm, numerical_rank};

#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("player {player}: policy-evaluation regressor has rank {rank} < {cols}")]
    RankCollapse { player: usize, rank: usize, cols: usize },
    #[error("player {player}: policy evaluation produced non-finite weights")]
    Divergent { player: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerEval {
    pub theta: Vec<f64>,
    pub rank: usize,
    /// Root-mean-square Lyapunov residual over the grid.
    pub rms_residual: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PiOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub rtol: f64,
}

impl Default for PiOptions {
    fn default() -> Self {
        PiOptions { tol: 1e-6, max_iter: 100, rtol: 1e-8 }
    }
}

/// Policy-iteration state after the last completed sweep.
#[derive(Debug, Clone)]
pub struct PiState {
    pub iteration: usize,
    pub thetas: Vec<DVector<f64>>,
    pub strategies: Vec<ExprVec>,
    pub last_change: f64,
}

#[derive(Debug, Clone)]
pub struct PiOutcome {
    pub state: PiState,
    pub converged: bool,
    /// `max_i ‖Δθ_i‖` between consecutive sweeps.
    pub history: Vec<f64>,
    pub evals: Vec<PlayerEval>,
}

fn phi_jacobians(model: &GameModel) -> Result<Vec<ExprMat>, ExprError> {
    model.players.iter().map(|p| jacobian(&p.phi, model.dynamics.n)).collect()
}

/// Least-squares Lyapunov solve for every player under fixed strategies.
pub fn policy_evaluate(
    model: &GameModel,
    strategies: &[ExprVec],
    grid: &[Vec<f64>],
    rtol: f64,
) -> Result<Vec<PlayerEval>, ForwardError> {
    let jac = phi_jacobians(model)?;
    let np = model.n_players();
    let mut mats: Vec<DMatrix<f64>> = model.players.iter().map(|p| DMatrix::zeros(grid.len(), p.phi.len())).collect();
    let mut rhs: Vec<DVector<f64>> = (0..np).map(|_| DVector::zeros(grid.len())).collect();
    for (r, x) in grid.iter().enumerate() {
        let u = eval_strategies(strategies, x)?;
        let fg = model.dynamics.rhs(x, &u)?;
        let u2 = u.component_mul(&u);
        for (i, pl) in model.players.iter().enumerate() {
            let row = jac[i].eval(x)? * &fg;
            mats[i].row_mut(r).copy_from(&row.transpose());
            rhs[i][r] = -(pl.alpha.dot(&u2) + pl.beta.dot(&pl.psi.eval(x)?));
        }
    }
    let mut out = Vec::with_capacity(np);
    for i in 0..np {
        let m = &mats[i];
        let rank = numerical_rank(m, rtol);
        if rank < m.ncols() {
            return Err(ForwardError::RankCollapse { player: i, rank, cols: m.ncols() });
        }
        let theta = lstsq_min_norm(m, &rhs[i], rtol);
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(ForwardError::Divergent { player: i });
        }
        let res = m * &theta - &rhs[i];
        out.push(PlayerEval {
            theta: theta.iter().copied().collect(),
            rank,
            rms_residual: res.norm() / (res.len().max(1) as f64).sqrt(),
            max_residual: res.amax(),
        });
    }
    Ok(out)
}

/// Strategies generated by the value weights of every player.
pub fn policy_improve(model: &GameModel, thetas: &[DVector<f64>]) -> Result<Vec<ExprVec>, ForwardError> {
    model
        .players
        .iter()
        .enumerate()
        .map(|(i, pl)| {
            let v = pl.phi.dot(thetas[i].as_slice());
            strategy_from_value(&v, &model.r_ii(i), &model.dynamics.g[i]).map_err(ForwardError::from)
        })
        .collect()
}

pub fn solve_fne_pi(model: &GameModel, init: Vec<ExprVec>, opts: PiOptions) -> Result<PiOutcome, ForwardError> {
    let grid = model.domain.grid();
    let mut strategies = init;
    let mut prev: Option<Vec<DVector<f64>>> = None;
    let mut history = vec![];
    let mut evals = vec![];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < opts.max_iter {
        iteration += 1;
        evals = policy_evaluate(model, &strategies, &grid, opts.rtol)?;
        let thetas: Vec<DVector<f64>> = evals.iter().map(|e| DVector::from_vec(e.theta.clone())).collect();
        let change = match &prev {
            None => f64::INFINITY,
            Some(p) => p.iter().zip(&thetas).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max),
        };
        if prev.is_some() {
            history.push(change);
        }
        strategies = policy_improve(model, &thetas)?;
        prev = Some(thetas);
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    let thetas = prev.unwrap_or_default();
    let last_change = history.last().copied().unwrap_or(f64::INFINITY);
    Ok(PiOutcome {
        state: PiState { iteration, thetas, strategies, last_change },
        converged,
        history,
        evals,
    })
}

/// Max grid residual of the coupled HJB equations for the strategies generated by `thetas`.
pub fn hjb_residual(model: &GameModel, thetas: &[DVector<f64>], grid: &[Vec<f64>]) -> Result<f64, ForwardError> {
    let jac = phi_jacobians(model)?;
    let strategies = policy_improve(model, thetas)?;
    let mut worst: f64 = 0.0;
    for x in grid {
        let u = eval_strategies(&strategies, x)?;
        let fg = model.dynamics.rhs(x, &u)?;
        let u2 = u.component_mul(&u);
        for (i, pl) in model.players.iter().enumerate() {
            let r = thetas[i].dot(&(jac[i].eval(x)? * &fg)) + pl.alpha.dot(&u2) + pl.beta.dot(&pl.psi.eval(x)?);
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}
