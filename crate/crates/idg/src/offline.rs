//! Offline inverse game: strategy identification from demonstrations and
//! the affine set of cost parameters consistent with the coupled HJB equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::expr::{jacobian, Expr, ExprError, ExprMat, ExprVec};
use crate::forward::{solve_fne_pi, ForwardError, PiOptions};
use crate::game::{eval_strategies, min_on_grid, Dynamics, GameError, GameModel, GroundTruth, PlayerModel};
use crate::linalg::{lstsq_min_norm, numerical_rank, pinv, RankedFactorization};
use crate::scenario::Scenario;
use crate::sim::{integrate_closed_loop, nsae, sample, Demonstrations, Nsae, SimError, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum OfflineError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("block {block} of the identified strategy weights is zero; cannot normalize")]
    DegenerateBlock { block: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no valid parameter element in w range [{lo}, {hi}]")]
    NoValidElement { lo: f64, hi: f64 },
    #[error("search over a {0}-dimensional set is not supported; give w explicitly")]
    SearchDim(usize),
    #[error("player {player}, {stage}: {msg}")]
    Stage { player: usize, stage: &'static str, msg: String },
}

/// Partition of the value basis into elements visible through `G_iᵀ` (`r`)
/// and elements annihilated by it (`nr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSplit {
    pub r: Vec<usize>,
    pub nr: Vec<usize>,
    /// `max_x ‖G_i(x)ᵀ ∇φ_j(x)‖` per basis element.
    pub evidence: Vec<f64>,
}

impl BasisSplit {
    pub fn hbar(&self) -> usize {
        self.r.len()
    }
}

pub fn split_basis(phi: &ExprVec, g: &ExprMat, probes: &[Vec<f64>], tol: f64) -> Result<BasisSplit, OfflineError> {
    let jac = jacobian(phi, g.rows())?;
    let mut evidence = vec![0.0f64; phi.len()];
    for x in probes {
        let gm = g.eval(x)?;
        let jm = jac.eval(x)?;
        // row j of J·G is (G_iᵀ ∇φ_j)ᵀ
        let jg = jm * gm;
        for (j, ev) in evidence.iter_mut().enumerate() {
            *ev = ev.max(jg.row(j).norm());
        }
    }
    let (r, nr) = (0..phi.len()).partition(|&j| evidence[j] > tol);
    Ok(BasisSplit { r, nr, evidence })
}

/// Symbolic `Φ̄_i(x)`: block-diagonal, one block row of length `h̄` per control channel.
#[derive(Debug, Clone)]
pub struct FneStructure {
    pub p: usize,
    pub hbar: usize,
    pub phibar: ExprMat,
}

pub fn fne_structure(phi: &ExprVec, g: &ExprMat, split: &BasisSplit) -> Result<FneStructure, OfflineError> {
    let n = g.rows();
    let p = g.cols();
    let hbar = split.hbar();
    let jac = jacobian(phi, n)?;
    let mut phibar = ExprMat::zeros(p, p * hbar);
    for k in 0..p {
        for (jj, &j) in split.r.iter().enumerate() {
            let e = Expr::sum((0..n).map(|row| g.get(row, k).clone().mul(jac.get(j, row).clone())));
            phibar.set(k, k * hbar + jj, e);
        }
    }
    Ok(FneStructure { p, hbar, phibar })
}

impl FneStructure {
    /// `−½ Φ̄(x)`.
    pub fn regressor(&self, x: &[f64]) -> Result<DMatrix<f64>, ExprError> {
        Ok(self.phibar.eval(x)? * -0.5)
    }

    /// Symbolic strategy `−½ Φ̄ θ̄`.
    pub fn strategy(&self, theta_bar: &[f64]) -> ExprVec {
        (0..self.p)
            .map(|k| {
                Expr::sum((0..self.phibar.cols()).map(|c| self.phibar.get(k, c).clone().scale(theta_bar[c])))
                    .scale(-0.5)
            })
            .collect()
    }
}

/// Stack `−½Φ̄(x_k)` and the observed controls of one player.
pub fn assemble_fne_data(
    demos: &Demonstrations,
    st: &FneStructure,
    u_offset: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), OfflineError> {
    let rows = demos.count() * st.p;
    let mut m = DMatrix::zeros(rows, st.p * st.hbar);
    let mut z = DVector::zeros(rows);
    for (s, smp) in demos.iter().enumerate() {
        if smp.u.len() < u_offset + st.p {
            return Err(OfflineError::Dimension(format!("sample has {} controls", smp.u.len())));
        }
        let blk = st.regressor(smp.x.as_slice())?;
        for k in 0..st.p {
            m.row_mut(s * st.p + k).copy_from(&blk.row(k));
            z[s * st.p + k] = smp.u[u_offset + k];
        }
    }
    Ok((m, z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FneIdentResult {
    pub theta_bar: Vec<f64>,
    pub rank: usize,
    pub full_rank: bool,
    pub residual: f64,
    /// Unit-norm reduced weights; present on the full-rank branch only.
    pub theta_r: Option<Vec<f64>>,
    /// Largest pairwise difference of the normalized blocks.
    pub block_spread: Option<f64>,
    pub strategy: Vec<String>,
}

/// `(1/p) Σ_j P_j θ̄ / ‖P_j θ̄‖` and the spread between the normalized blocks.
pub fn reduce_theta(theta_bar: &DVector<f64>, p: usize, hbar: usize) -> Result<(DVector<f64>, f64), OfflineError> {
    let mut blocks = Vec::with_capacity(p);
    for j in 0..p {
        let b = theta_bar.rows(j * hbar, hbar).into_owned();
        let nb = b.norm();
        if !(nb > 0.0) {
            return Err(OfflineError::DegenerateBlock { block: j });
        }
        blocks.push(b / nb);
    }
    let mut spread: f64 = 0.0;
    for a in 0..p {
        for b in a + 1..p {
            spread = spread.max((&blocks[a] - &blocks[b]).norm());
        }
    }
    let mean = blocks.iter().fold(DVector::zeros(hbar), |acc, b| acc + b) / p as f64;
    Ok((mean, spread))
}

pub fn identify_fne(
    m: &DMatrix<f64>,
    z: &DVector<f64>,
    st: &FneStructure,
    rtol: f64,
) -> Result<(FneIdentResult, ExprVec), OfflineError> {
    let rank = numerical_rank(m, rtol);
    let theta_bar = lstsq_min_norm(m, z, rtol);
    let residual = (m * &theta_bar - z).norm();
    let full_rank = rank == st.p * st.hbar && st.hbar > 0;
    let (theta_r, block_spread) = if full_rank {
        let (t, s) = reduce_theta(&theta_bar, st.p, st.hbar)?;
        (Some(t.iter().copied().collect()), Some(s))
    } else {
        (None, None)
    };
    let strategy = st.strategy(theta_bar.as_slice());
    Ok((
        FneIdentResult {
            theta_bar: theta_bar.iter().copied().collect(),
            rank,
            full_rank,
            residual,
            theta_r,
            block_spread,
            strategy: strategy.to_strings(),
        },
        strategy,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HjbMode {
    /// `θ^(r)` fixed from the identified strategy, unknowns `[α, β, θ^(−r)]`.
    Reduced,
    /// All value weights unknown, homogeneous system `[α, β, θ]`.
    Full,
}

/// Everything needed to form one HJB regression row for a player.
#[derive(Debug, Clone)]
pub struct HjbContext {
    pub mode: HjbMode,
    pub split: BasisSplit,
    pub phi_jac: ExprMat,
    pub psi: ExprVec,
    pub p_total: usize,
    pub cost_offset: Option<Expr>,
}

impl HjbContext {
    pub fn new(
        mode: HjbMode,
        split: BasisSplit,
        phi: &ExprVec,
        psi: &ExprVec,
        n: usize,
        p_total: usize,
        cost_offset: Option<Expr>,
    ) -> Result<Self, OfflineError> {
        Ok(HjbContext { mode, split, phi_jac: jacobian(phi, n)?, psi: psi.clone(), p_total, cost_offset })
    }

    pub fn eta_len(&self) -> usize {
        let v = match self.mode {
            HjbMode::Reduced => self.split.nr.len(),
            HjbMode::Full => self.split.r.len() + self.split.nr.len(),
        };
        self.p_total + self.psi.len() + v
    }

    /// `L_i`: picks `(α, β)` out of `η`.
    pub fn extraction(&self) -> DMatrix<f64> {
        let k = self.p_total + self.psi.len();
        let mut l = DMatrix::zeros(k, self.eta_len());
        for j in 0..k {
            l[(j, j)] = 1.0;
        }
        l
    }

    /// Regressor row and target at `x` for stacked strategy values `u`.
    pub fn row(
        &self,
        dynm: &Dynamics,
        x: &[f64],
        u: &DVector<f64>,
        theta_r: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, f64), OfflineError> {
        let fg = dynm.rhs(x, u)?;
        let jf = self.phi_jac.eval(x)? * fg;
        let psi = self.psi.eval(x)?;
        let mut row = DVector::zeros(self.eta_len());
        let mut c = 0;
        for v in u.iter() {
            row[c] = v * v;
            c += 1;
        }
        for v in psi.iter() {
            row[c] = *v;
            c += 1;
        }
        let mut target = 0.0;
        match self.mode {
            HjbMode::Reduced => {
                for &j in &self.split.nr {
                    row[c] = jf[j];
                    c += 1;
                }
                let tr = theta_r.ok_or_else(|| OfflineError::Dimension("reduced mode needs θ^(r)".into()))?;
                for (jj, &j) in self.split.r.iter().enumerate() {
                    target -= tr[jj] * jf[j];
                }
            }
            HjbMode::Full => {
                for j in 0..jf.len() {
                    row[c] = jf[j];
                    c += 1;
                }
            }
        }
        if let Some(off) = &self.cost_offset {
            target -= off.eval(x)?;
        }
        Ok((row, target))
    }
}

pub fn assemble_hjb_data(
    ctx: &HjbContext,
    dynm: &Dynamics,
    mu_hat: &[ExprVec],
    theta_r: Option<&DVector<f64>>,
    grid: &[Vec<f64>],
) -> Result<(DMatrix<f64>, DVector<f64>), OfflineError> {
    let mut m = DMatrix::zeros(grid.len(), ctx.eta_len());
    let mut z = DVector::zeros(grid.len());
    for (r, x) in grid.iter().enumerate() {
        let u = eval_strategies(mu_hat, x)?;
        let (row, t) = ctx.row(dynm, x, &u, theta_r)?;
        m.row_mut(r).copy_from(&row.transpose());
        z[r] = t;
    }
    Ok((m, z))
}

/// `{ particular + null_basis · w }`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSet {
    pub mode: HjbMode,
    pub particular: DVector<f64>,
    pub null_basis: DMatrix<f64>,
    pub extraction: DMatrix<f64>,
    pub residual: f64,
    pub target_norm: f64,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub unique: bool,
}

impl SolutionSet {
    pub fn element(&self, w: &[f64]) -> DVector<f64> {
        let eta = &self.particular + &self.null_basis * DVector::from_column_slice(w);
        match self.mode {
            HjbMode::Reduced => eta,
            // homogeneous: only the direction is meaningful
            HjbMode::Full => {
                let nrm = eta.norm();
                if nrm > 0.0 {
                    eta / nrm
                } else {
                    eta
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.null_basis.ncols()
    }
}

pub fn solve_solution_set(
    m: &DMatrix<f64>,
    z: &DVector<f64>,
    extraction: DMatrix<f64>,
    mode: HjbMode,
    rtol: f64,
) -> SolutionSet {
    let f = RankedFactorization::new(m, rtol);
    let particular = if m.nrows() == 0 { DVector::zeros(m.ncols()) } else { f.pinv() * z };
    let residual = if m.nrows() == 0 { 0.0 } else { (m * &particular - z).norm() };
    let null_basis = f.v_null.clone();
    let unique = null_basis.ncols() == 0 || (&extraction * &null_basis).amax() <= 1e-9;
    SolutionSet {
        mode,
        particular,
        null_basis,
        extraction,
        residual,
        target_norm: z.norm(),
        singular_values: f.singular_values.clone(),
        rank: f.rank,
        unique,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WSpec {
    Fixed(Vec<f64>),
    Search { lo: f64, hi: f64, points: usize },
}

impl Default for WSpec {
    fn default() -> Self {
        WSpec::Search { lo: -10.0, hi: 10.0, points: 2001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub w: Vec<f64>,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub accepted: bool,
    pub violations: Vec<String>,
    pub q_min: f64,
    pub q_argmin: Vec<f64>,
    /// Contiguous valid `w` range containing the selected element (1-dim search).
    pub valid_interval: Option<(f64, f64)>,
}

/// Data the validity filter needs about the player.
pub struct SelectContext<'a> {
    pub own_offset: usize,
    pub own_p: usize,
    pub p_total: usize,
    pub psi: &'a ExprVec,
    pub grid: &'a [Vec<f64>],
}

fn check_element(set: &SolutionSet, w: &[f64], cx: &SelectContext) -> Result<Selection, OfflineError> {
    let mut eta = set.element(w);
    let ab = &set.extraction * &eta;
    if set.mode == HjbMode::Full {
        // orient the ray so that own control weights are positive
        let own: f64 = ab.rows(cx.own_offset, cx.own_p).sum();
        if own < 0.0 {
            eta.neg_mut();
        }
    }
    let ab = &set.extraction * &eta;
    let alpha: Vec<f64> = ab.rows(0, cx.p_total).iter().copied().collect();
    let beta: Vec<f64> = ab.rows(cx.p_total, ab.len() - cx.p_total).iter().copied().collect();
    let mut violations = vec![];
    for (k, &a) in alpha.iter().enumerate() {
        let own = k >= cx.own_offset && k < cx.own_offset + cx.own_p;
        if own && !(a > 0.0) {
            violations.push(format!("alpha[{k}] = {a} is not positive"));
        }
        if !own && !(a >= 0.0) {
            violations.push(format!("alpha[{k}] = {a} is negative"));
        }
    }
    let q = cx.psi.dot(&beta);
    let (q_min, q_argmin) = min_on_grid(&q, cx.grid, 0.1)?;
    if !(q_min > 0.0) {
        violations.push(format!("Q = {q_min} at {q_argmin:?}"));
    }
    Ok(Selection {
        w: w.to_vec(),
        eta: eta.iter().copied().collect(),
        alpha,
        beta,
        accepted: violations.is_empty(),
        violations,
        q_min,
        q_argmin,
        valid_interval: None,
    })
}

/// Pick an element of the set. Fixed `w` is always returned with its filter
/// verdict; search mode fails when nothing in range passes.
pub fn select_parameters(set: &SolutionSet, spec: &WSpec, cx: &SelectContext) -> Result<Selection, OfflineError> {
    let d = set.dim();
    match spec {
        WSpec::Fixed(w) => {
            if w.len() != d {
                return Err(OfflineError::Dimension(format!("w has {} entries, set is {d}-dimensional", w.len())));
            }
            check_element(set, w, cx)
        }
        WSpec::Search { lo, hi, points } => {
            if d == 0 {
                let s = check_element(set, &[], cx)?;
                return if s.accepted { Ok(s) } else { Err(OfflineError::NoValidElement { lo: *lo, hi: *hi }) };
            }
            if d != 1 {
                return Err(OfflineError::SearchDim(d));
            }
            let n = (*points).max(2);
            let ws: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
            let mut first: Option<(usize, Selection)> = None;
            let mut last_valid = 0;
            for (k, &w) in ws.iter().enumerate() {
                let s = check_element(set, &[w], cx)?;
                match &first {
                    None if s.accepted => {
                        last_valid = k;
                        first = Some((k, s));
                    }
                    Some(_) if s.accepted => last_valid = k,
                    Some(_) => break,
                    None => {}
                }
            }
            let (k0, mut s) = first.ok_or(OfflineError::NoValidElement { lo: *lo, hi: *hi })?;
            s.valid_interval = Some((ws[k0], ws[last_valid]));
            Ok(s)
        }
    }
}

/// Distance from a full parameter vector `η` to the affine set.
pub fn membership_residual(set: &SolutionSet, eta: &DVector<f64>) -> f64 {
    let d = eta - &set.particular;
    let proj = &set.null_basis * (set.null_basis.transpose() * &d);
    (d - proj).norm()
}

/// Distance from `(α, β)` to the projection of the set under `L_i`.
pub fn membership_residual_ab(set: &SolutionSet, ab: &DVector<f64>) -> f64 {
    let base = &set.extraction * &set.particular;
    let dir = &set.extraction * &set.null_basis;
    let d = ab - base;
    if dir.ncols() == 0 {
        return d.norm();
    }
    let w = pinv(&dir, 1e-10) * &d;
    (d - dir * w).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub mode: HjbMode,
    pub particular: Vec<f64>,
    /// Null-space basis, one entry per column.
    pub null_basis: Vec<Vec<f64>>,
    pub extraction_rows: usize,
    pub residual: f64,
    pub target_norm: f64,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub unique: bool,
}

impl From<&SolutionSet> for SetSummary {
    fn from(s: &SolutionSet) -> Self {
        SetSummary {
            mode: s.mode,
            particular: s.particular.iter().copied().collect(),
            null_basis: s.null_basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
            extraction_rows: s.extraction.nrows(),
            residual: s.residual,
            target_norm: s.target_norm,
            singular_values: s.singular_values.clone(),
            rank: s.rank,
            unique: s.unique,
        }
    }
}

impl SetSummary {
    /// Rebuild the set from its serialized form.
    pub fn to_set(&self) -> SolutionSet {
        let len = self.particular.len();
        let cols: Vec<DVector<f64>> = self.null_basis.iter().map(|c| DVector::from_vec(c.clone())).collect();
        let null_basis = if cols.is_empty() { DMatrix::zeros(len, 0) } else { DMatrix::from_columns(&cols) };
        let mut extraction = DMatrix::zeros(self.extraction_rows, len);
        for j in 0..self.extraction_rows {
            extraction[(j, j)] = 1.0;
        }
        SolutionSet {
            mode: self.mode,
            particular: DVector::from_vec(self.particular.clone()),
            null_basis,
            extraction,
            residual: self.residual,
            target_norm: self.target_norm,
            singular_values: self.singular_values.clone(),
            rank: self.rank,
            unique: self.unique,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerOffline {
    pub split: BasisSplit,
    pub fne: FneIdentResult,
    /// `max_k ‖μ̂(x_k) − u_k‖` over the demonstrations.
    pub reconstruction_error: f64,
    pub set: SetSummary,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCheck {
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub lyapunov_rms: Vec<f64>,
    /// FNE of the identified costs against ground truth.
    pub nsae_vs_gt: Nsae,
    /// FNE of the identified costs against the identified control laws.
    pub nsae_vs_identified: Nsae,
    /// Identified control laws against ground truth.
    pub nsae_identified_vs_gt: Nsae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub demonstrations: usize,
    pub samples: usize,
    pub players: Vec<PlayerOffline>,
    pub forward: Option<ForwardCheck>,
    pub forward_error: Option<String>,
}

/// Trajectories produced along the way, for CSV export.
pub struct OfflineRun {
    pub report: OfflineReport,
    pub sets: Vec<SolutionSet>,
    pub mu_hat: Vec<ExprVec>,
    pub gt: Trajectory,
    pub verified: Option<Trajectory>,
}

/// Ground-truth closed-loop trajectory of a scenario.
pub fn generate_gt(sc: &Scenario) -> Result<Trajectory, OfflineError> {
    let mu = sc.model.gt_strategies()?;
    Ok(integrate_closed_loop(&sc.model.dynamics, &mu, &sc.plan.inits, sc.plan.segment_t, sc.plan.h)?)
}

/// Per-player split, regressor structure, result, identified strategy and reconstruction error.
pub type PlayerIdent = (BasisSplit, FneStructure, FneIdentResult, ExprVec, f64);

/// Identified strategies and per-player FNE results from demonstrations.
pub fn identify_all(sc: &Scenario, demos: &Demonstrations) -> Result<Vec<PlayerIdent>, OfflineError> {
    let model = &sc.model;
    let dynm = &model.dynamics;
    let grid = model.domain.grid();
    let mut probes = grid.clone();
    let stride = (demos.count() / 500).max(1);
    probes.extend(demos.iter().step_by(stride).map(|s| s.x.iter().copied().collect::<Vec<_>>()));

    let mut out = vec![];
    for (i, pl) in model.players.iter().enumerate() {
        let stage = |e: OfflineError, stage: &'static str| OfflineError::Stage { player: i, stage, msg: e.to_string() };
        let split = split_basis(&pl.phi, &dynm.g[i], &probes, sc.offline.split_tol).map_err(|e| stage(e, "split"))?;
        let st = fne_structure(&pl.phi, &dynm.g[i], &split).map_err(|e| stage(e, "structure"))?;
        let off = dynm.offset(i);
        let (m, z) = assemble_fne_data(demos, &st, off).map_err(|e| stage(e, "fne data"))?;
        let (res, mu) = identify_fne(&m, &z, &st, sc.offline.rtol).map_err(|e| stage(e, "fne identification"))?;
        let mut recon: f64 = 0.0;
        for s in demos.iter() {
            let u = mu.eval(s.x.as_slice())?;
            let d = &u - s.u.rows(off, st.p);
            recon = recon.max(d.norm());
        }
        out.push((split, st, res, mu, recon));
    }
    Ok(out)
}

/// Model whose costs are the selected `(α̂, β̂)`, for forward verification.
pub fn identified_model(model: &GameModel, params: &[(Vec<f64>, Vec<f64>)]) -> GameModel {
    let players = model
        .players
        .iter()
        .zip(params)
        .map(|(pl, (a, b))| PlayerModel {
            phi: pl.phi.clone(),
            psi: pl.psi.clone(),
            alpha: DVector::from_vec(a.clone()),
            beta: DVector::from_vec(b.clone()),
            theta: None,
        })
        .collect();
    GameModel {
        dynamics: model.dynamics.clone(),
        players,
        domain: model.domain.clone(),
        truth: GroundTruth::Parameters,
    }
}

/// Solve the forward game with the given costs from `init` and compare trajectories.
pub fn forward_verify(
    sc: &Scenario,
    params: &[(Vec<f64>, Vec<f64>)],
    init: Vec<ExprVec>,
    gt: &Trajectory,
    pi: PiOptions,
) -> Result<(ForwardCheck, Trajectory), OfflineError> {
    let fwd_model = identified_model(&sc.model, params);
    let stage = |e: String| OfflineError::Stage { player: 0, stage: "forward", msg: e };
    let out = solve_fne_pi(&fwd_model, init.clone(), pi).map_err(|e: ForwardError| stage(e.to_string()))?;
    let plan = &sc.plan;
    let dynm = &sc.model.dynamics;
    let verified = integrate_closed_loop(dynm, &out.state.strategies, &plan.inits, plan.segment_t, plan.h)?;
    let identified = integrate_closed_loop(dynm, &init, &plan.inits, plan.segment_t, plan.h)?;
    let check = ForwardCheck {
        converged: out.converged,
        iterations: out.state.iteration,
        history: out.history.clone(),
        thetas: out.state.thetas.iter().map(|t| t.iter().copied().collect()).collect(),
        lyapunov_rms: out.evals.iter().map(|e| e.rms_residual).collect(),
        nsae_vs_gt: nsae(gt, &verified)?,
        nsae_vs_identified: nsae(&identified, &verified)?,
        nsae_identified_vs_gt: nsae(gt, &identified)?,
    };
    Ok((check, verified))
}

pub fn run_offline(sc: &Scenario) -> Result<OfflineRun, OfflineError> {
    let model = &sc.model;
    let dynm = &model.dynamics;
    let gt = generate_gt(sc)?;
    let demos = sample(&gt, sc.plan.dt)?;
    let ident = identify_all(sc, &demos)?;
    let mu_hat: Vec<ExprVec> = ident.iter().map(|t| t.3.clone()).collect();
    let grid = model.domain.grid();
    let p_total = dynm.p_total();

    let mut players = vec![];
    let mut sets = vec![];
    for (i, (split, _st, res, _mu, recon)) in ident.iter().enumerate() {
        let stage = |e: OfflineError, stage: &'static str| OfflineError::Stage { player: i, stage, msg: e.to_string() };
        let pl = &model.players[i];
        let mode = if res.full_rank { HjbMode::Reduced } else { HjbMode::Full };
        let ctx = HjbContext::new(mode, split.clone(), &pl.phi, &pl.psi, dynm.n, p_total, sc.cost_offsets[i].clone())
            .map_err(|e| stage(e, "hjb context"))?;
        let theta_r = res.theta_r.as_ref().map(|t| DVector::from_vec(t.clone()));
        let (m, z) = assemble_hjb_data(&ctx, dynm, &mu_hat, theta_r.as_ref(), &grid).map_err(|e| stage(e, "hjb data"))?;
        let set = solve_solution_set(&m, &z, ctx.extraction(), mode, sc.offline.rtol);
        let cx = SelectContext {
            own_offset: dynm.offset(i),
            own_p: dynm.p(i),
            p_total,
            psi: &pl.psi,
            grid: &grid,
        };
        let selection = select_parameters(&set, &sc.offline.w[i], &cx).map_err(|e| stage(e, "selection"))?;
        players.push(PlayerOffline {
            split: split.clone(),
            fne: res.clone(),
            reconstruction_error: *recon,
            set: SetSummary::from(&set),
            selection,
        });
        sets.push(set);
    }

    let params: Vec<(Vec<f64>, Vec<f64>)> =
        players.iter().map(|p| (p.selection.alpha.clone(), p.selection.beta.clone())).collect();
    let (forward, forward_error, verified) = match forward_verify(sc, &params, mu_hat.clone(), &gt, sc.offline.pi) {
        Ok((c, t)) => (Some(c), None, Some(t)),
        Err(e) => (None, Some(e.to_string()), None),
    };
    Ok(OfflineRun {
        report: OfflineReport {
            demonstrations: demos.segments.len(),
            samples: demos.count(),
            players,
            forward,
            forward_error,
        },
        sets,
        mu_hat,
        gt,
        verified,
    })
}
