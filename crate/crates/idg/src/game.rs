//! N-player input-affine game model and feedback strategies.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::expr::{Expr, ExprError, ExprMat, ExprVec};

#[derive(Debug, thiserror::Error)]
pub enum GameError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("player {player}: control weight R_ii[{channel}] = {value} must be positive")]
    NonPositiveWeight { player: usize, channel: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `ẋ = f(x) + Σ G_i(x) u_i`.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub n: usize,
    pub f: ExprVec,
    pub g: Vec<ExprMat>,
}

impl Dynamics {
    pub fn new(f: ExprVec, g: Vec<ExprMat>) -> Result<Self, GameError> {
        let n = f.len();
        for (i, gi) in g.iter().enumerate() {
            if gi.rows() != n {
                return Err(GameError::Dimension(format!(
                    "G_{} has {} rows, state dimension is {n}",
                    i + 1,
                    gi.rows()
                )));
            }
        }
        let arity = f.arity().max(g.iter().map(ExprMat::arity).max().unwrap_or(0));
        if arity > n {
            return Err(GameError::Dimension(format!("expressions reference x{arity} but n = {n}")));
        }
        Ok(Dynamics { n, f, g })
    }

    pub fn players(&self) -> usize {
        self.g.len()
    }

    pub fn p(&self, i: usize) -> usize {
        self.g[i].cols()
    }

    pub fn p_total(&self) -> usize {
        self.g.iter().map(ExprMat::cols).sum()
    }

    /// Offset of player `i`'s channels inside the stacked control vector.
    pub fn offset(&self, i: usize) -> usize {
        self.g[..i].iter().map(ExprMat::cols).sum()
    }

    /// `f(x) + Σ G_i(x) u_i` with `u` stacked over all players.
    pub fn rhs(&self, x: &[f64], u: &DVector<f64>) -> Result<DVector<f64>, ExprError> {
        let mut dx = self.f.eval(x)?;
        let mut off = 0;
        for gi in &self.g {
            let p = gi.cols();
            for r in 0..self.n {
                for c in 0..p {
                    let gv = gi.get(r, c);
                    if gv.is_zero() {
                        continue;
                    }
                    dx[r] += gv.eval(x)? * u[off + c];
                }
            }
            off += p;
        }
        Ok(dx)
    }
}

/// Per-player bases and (possibly estimated) parameters.
///
/// `alpha` holds the diagonals of `R_i1 .. R_iN` stacked in player order.
#[derive(Debug, Clone)]
pub struct PlayerModel {
    pub phi: ExprVec,
    pub psi: ExprVec,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub theta: Option<DVector<f64>>,
}

impl PlayerModel {
    pub fn cost(&self) -> Expr {
        self.psi.dot(self.beta.as_slice())
    }
}

/// How ground-truth strategies are produced.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// `V_i* = θ_i*ᵀ φ_i`.
    Parameters,
    /// Raw value-function expressions, possibly outside the span of `φ_i`.
    Expressions(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: Vec<f64>,
}

impl DomainBox {
    pub fn check(&self) -> Result<(), GameError> {
        let n = self.lower.len();
        if self.upper.len() != n || self.step.len() != n {
            return Err(GameError::Dimension("domain bounds and steps differ in length".into()));
        }
        for d in 0..n {
            if !(self.lower[d] < self.upper[d]) || self.step[d] <= 0.0 {
                return Err(GameError::Dimension(format!("invalid domain along x{}", d + 1)));
            }
            if self.lower[d] > 0.0 || self.upper[d] < 0.0 {
                return Err(GameError::Dimension(format!("domain along x{} excludes the origin", d + 1)));
            }
        }
        Ok(())
    }

    /// Equidistant grid, last coordinate varying fastest.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.lower.len())
            .map(|d| {
                let k = ((self.upper[d] - self.lower[d]) / self.step[d] + 1e-9).floor() as usize;
                (0..=k).map(|j| self.lower[d] + j as f64 * self.step[d]).collect()
            })
            .collect();
        let mut pts = vec![vec![]];
        for axis in &axes {
            let mut next = Vec::with_capacity(pts.len() * axis.len());
            for p in &pts {
                for &a in axis {
                    let mut q = p.clone();
                    q.push(a);
                    next.push(q);
                }
            }
            pts = next;
        }
        pts
    }
}

#[derive(Debug, Clone)]
pub struct GameModel {
    pub dynamics: Dynamics,
    pub players: Vec<PlayerModel>,
    pub domain: DomainBox,
    pub truth: GroundTruth,
}

impl GameModel {
    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    /// Diagonal of `R_ii` for player `i`.
    pub fn r_ii(&self, i: usize) -> Vec<f64> {
        let off = self.dynamics.offset(i);
        self.players[i].alpha.rows(off, self.dynamics.p(i)).iter().copied().collect()
    }

    pub fn value_function(&self, i: usize) -> Option<Expr> {
        match &self.truth {
            GroundTruth::Expressions(v) => v.get(i).cloned(),
            GroundTruth::Parameters => {
                let pl = &self.players[i];
                pl.theta.as_ref().map(|t| pl.phi.dot(t.as_slice()))
            }
        }
    }

    /// Ground-truth feedback strategies of all players.
    pub fn gt_strategies(&self) -> Result<Vec<ExprVec>, GameError> {
        (0..self.n_players())
            .map(|i| {
                let v = self.value_function(i).ok_or_else(|| {
                    GameError::Dimension(format!("player {} has no ground-truth value function", i + 1))
                })?;
                strategy_from_value(&v, &self.r_ii(i), &self.dynamics.g[i])
            })
            .collect()
    }
}

/// `μ = −½ R⁻¹ Gᵀ ∇V` for a diagonal `R`.
pub fn strategy_from_value(v: &Expr, r_ii: &[f64], g: &ExprMat) -> Result<ExprVec, GameError> {
    if r_ii.len() != g.cols() {
        return Err(GameError::Dimension(format!(
            "{} weights for {} control channels",
            r_ii.len(),
            g.cols()
        )));
    }
    let grad = v.gradient(g.rows())?;
    let mut out = Vec::with_capacity(g.cols());
    for (k, &r) in r_ii.iter().enumerate() {
        if !(r > 0.0) {
            return Err(GameError::NonPositiveWeight { player: 0, channel: k, value: r });
        }
        let s = Expr::sum((0..g.rows()).map(|j| g.get(j, k).clone().mul(grad.get(j).clone())));
        out.push(s.scale(-0.5 / r));
    }
    Ok(ExprVec::new(out))
}

/// Evaluate per-player strategies and stack them.
pub fn eval_strategies(strategies: &[ExprVec], x: &[f64]) -> Result<DVector<f64>, ExprError> {
    let p: usize = strategies.iter().map(ExprVec::len).sum();
    let mut u = DVector::zeros(p);
    let mut off = 0;
    for s in strategies {
        for (k, e) in s.items().iter().enumerate() {
            u[off + k] = e.eval(x)?;
        }
        off += s.len();
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub player: Option<usize>,
    pub passed: bool,
    /// Hard failures make the model unusable; soft ones are reported only.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub checks: Vec<Check>,
}

impl Diagnostics {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn hard_failure(&self) -> bool {
        self.checks.iter().any(|c| c.hard && !c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Minimum of `Q(x)` over grid points outside a ball around the origin,
/// with the arg-min point.
pub fn min_on_grid(q: &Expr, grid: &[Vec<f64>], exclude_radius: f64) -> Result<(f64, Vec<f64>), ExprError> {
    let mut best = (f64::INFINITY, vec![]);
    for x in grid {
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() <= exclude_radius {
            continue;
        }
        let v = q.eval(x)?;
        if v < best.0 {
            best = (v, x.clone());
        }
    }
    Ok(best)
}

/// Structural and sampled sanity checks; never aborts.
pub fn validate(model: &GameModel) -> Diagnostics {
    let mut checks = Vec::new();
    let dynm = &model.dynamics;
    let origin = vec![0.0; dynm.n];

    match dynm.f.eval(&origin) {
        Ok(f0) => checks.push(Check {
            name: "f(0) = 0".into(),
            player: None,
            passed: f0.amax() <= 1e-12,
            hard: false,
            detail: format!("max |f(0)| = {:e}", f0.amax()),
        }),
        Err(e) => checks.push(Check {
            name: "f(0) = 0".into(),
            player: None,
            passed: false,
            hard: true,
            detail: e.to_string(),
        }),
    }

    if let Err(e) = model.domain.check() {
        checks.push(Check { name: "domain box".into(), player: None, passed: false, hard: true, detail: e.to_string() });
    }
    let grid = model.domain.grid();

    for (i, pl) in model.players.iter().enumerate() {
        let off = dynm.offset(i);
        let p_i = dynm.p(i);
        let mut bad_self = vec![];
        let mut bad_cross = vec![];
        for (k, &a) in pl.alpha.iter().enumerate() {
            let own = k >= off && k < off + p_i;
            if own && !(a > 0.0) {
                bad_self.push(format!("alpha[{k}] = {a}"));
            } else if !own && !(a >= 0.0) {
                bad_cross.push(format!("alpha[{k}] = {a}"));
            }
        }
        checks.push(Check {
            name: "R_ii > 0".into(),
            player: Some(i),
            passed: bad_self.is_empty(),
            hard: true,
            detail: bad_self.join(", "),
        });
        checks.push(Check {
            name: "R_ij >= 0".into(),
            player: Some(i),
            passed: bad_cross.is_empty(),
            hard: true,
            detail: bad_cross.join(", "),
        });
        match min_on_grid(&pl.cost(), &grid, 0.1) {
            Ok((v, at)) => checks.push(Check {
                name: "Q positive on grid".into(),
                player: Some(i),
                passed: v > 0.0,
                hard: false,
                detail: format!("min Q = {v:e} at {at:?}"),
            }),
            Err(e) => checks.push(Check {
                name: "Q positive on grid".into(),
                player: Some(i),
                passed: false,
                hard: false,
                detail: e.to_string(),
            }),
        }
    }

    if checks.iter().all(|c| !(c.hard && !c.passed)) {
        match model.gt_strategies() {
            Ok(mu) => {
                let res = eval_strategies(&mu, &origin);
                let (passed, detail) = match res {
                    Ok(u) => (u.amax() <= 1e-12, format!("max |mu(0)| = {:e}", u.amax())),
                    Err(e) => (false, e.to_string()),
                };
                checks.push(Check { name: "mu(0) = 0".into(), player: None, passed, hard: false, detail });
            }
            Err(e) => checks.push(Check {
                name: "mu(0) = 0".into(),
                player: None,
                passed: false,
                hard: false,
                detail: e.to_string(),
            }),
        }
    }
    Diagnostics { checks }
}
