//! Online inverse game: gradient-flow adaptation of the strategy weights and
//! of the HJB parameters on a streamed ground-truth closed loop.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{ExprError, ExprVec};
use crate::game::{eval_strategies, GameError};
use crate::offline::{
    fne_structure, forward_verify, generate_gt, membership_residual_ab, reduce_theta, split_basis, ForwardCheck, FneStructure, HjbContext, HjbMode, OfflineError, OfflineRun,
};
use crate::scenario::Scenario;
use crate::sim::{closed_loop_rhs, rk4_step, steps_in, SimError};

#[derive(Debug, thiserror::Error)]
pub enum OnlineError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("non-finite learner state for player {player} at t = {t}")]
    NonFinite { player: usize, t: f64 },
    #[error("stopping metric needs {needed} samples, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("invalid online configuration: {0}")]
    Config(String),
}

/// How a gradient flow is advanced over one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    /// Exact flow with the regressor held constant over the step.
    Zoh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub amplitude: f64,
    pub sines: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        ExcitationSpec { amplitude: 3.0, sines: 3, f_lo: 0.5, f_hi: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub tau: Vec<f64>,
    pub kappa: Vec<f64>,
    pub h: f64,
    /// Stopping window `T` in seconds.
    pub window: f64,
    pub threshold: f64,
    pub horizon: f64,
    pub fne_integrator: Integrator,
    pub hjb_integrator: Integrator,
    pub excitation: ExcitationSpec,
    /// Trace decimation in steps.
    pub trace_every: usize,
    /// Length of the PE diagnostic window in seconds.
    pub pe_window: f64,
    /// Online/offline `θ̄` gap above which the report flags a discrepancy.
    pub discrepancy_tol: f64,
}

impl OnlineConfig {
    pub fn check(&self, players: usize) -> Result<(), OnlineError> {
        let bad = |m: String| Err(OnlineError::Config(m));
        if self.tau.len() != players || self.kappa.len() != players {
            return bad(format!("need {players} learning rates per law"));
        }
        if self.tau.iter().chain(&self.kappa).any(|v| !(*v > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(self.h > 0.0) || !(self.window > 0.0) || !(self.horizon > 0.0) || !(self.pe_window > 0.0) {
            return bad("h, window, horizon and pe_window must be positive".into());
        }
        let nyq = 0.5 / self.h;
        let e = &self.excitation;
        if !(e.f_lo > 0.0 && e.f_lo <= e.f_hi && e.f_hi < nyq) {
            return bad(format!("excitation band [{}, {}] Hz must lie in (0, {nyq})", e.f_lo, e.f_hi));
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Frequencies of one excitation channel after reset `reset`.
pub fn excitation_freqs(spec: &ExcitationSpec, seed: u64, channel: usize, reset: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((reset as u64) << 32) | channel as u64);
    (0..spec.sines).map(|_| rng.random_range(spec.f_lo..=spec.f_hi)).collect()
}

/// Sum of sines at time `t` for a channel and reset index.
pub fn excitation(t: f64, spec: &ExcitationSpec, seed: u64, channel: usize, reset: usize) -> f64 {
    excitation_freqs(spec, seed, channel, reset)
        .iter()
        .map(|f| spec.amplitude * (2.0 * std::f64::consts::PI * f * t).sin())
        .sum()
}

/// One step of `θ̇ = −r Mᵀ(Mθ − z)` with `M` rows as outputs.
pub fn flow_step(theta: &mut DVector<f64>, m: &DMatrix<f64>, z: &DVector<f64>, rate: f64, h: f64, integ: Integrator) {
    let e = m * &*theta - z;
    match integ {
        Integrator::Euler => *theta -= m.transpose() * e * (rate * h),
        Integrator::Zoh => {
            if m.nrows() == 1 {
                let row = m.row(0);
                let q = row.norm_squared();
                if q == 0.0 {
                    return;
                }
                let g = -(-rate * h * q).exp_m1() / q;
                *theta -= row.transpose() * (e[0] * g);
                return;
            }
            let eig = SymmetricEigen::new(m * m.transpose());
            let mut ue = eig.eigenvectors.transpose() * e;
            for (k, lam) in eig.eigenvalues.iter().enumerate() {
                let g = if *lam > 1e-300 { -(-rate * h * lam).exp_m1() / lam } else { rate * h };
                ue[k] *= g;
            }
            *theta -= m.transpose() * (eig.eigenvectors * ue);
        }
    }
}

/// Strategy-weight law at the true state.
pub fn fne_adapt_step(
    theta_bar: &mut DVector<f64>,
    st: &FneStructure,
    x: &[f64],
    u_i: &DVector<f64>,
    h: f64,
    tau: f64,
    integ: Integrator,
) -> Result<(), ExprError> {
    let m = st.regressor(x)?;
    flow_step(theta_bar, &m, u_i, tau, h, integ);
    Ok(())
}

/// HJB-parameter law at the evaluation state. Returns the regressor row used.
#[allow(clippy::too_many_arguments)]
pub fn hjb_adapt_step(
    eta: &mut DVector<f64>,
    ctx: &HjbContext,
    dynm: &crate::game::Dynamics,
    x_eval: &[f64],
    u_hat: &DVector<f64>,
    theta_r: &DVector<f64>,
    h: f64,
    kappa: f64,
    integ: Integrator,
) -> Result<DVector<f64>, OfflineError> {
    let (row, target) = ctx.row(dynm, x_eval, u_hat, Some(theta_r))?;
    let m = DMatrix::from_row_slice(1, row.len(), row.as_slice());
    flow_step(eta, &m, &DVector::from_element(1, target), kappa, h, integ);
    Ok(row)
}

fn trapz(samples: &[DVector<f64>], h: f64) -> DVector<f64> {
    let d = samples[0].len();
    let mut s = DVector::zeros(d);
    for v in samples {
        s += v;
    }
    (s - (&samples[0] + &samples[samples.len() - 1]) * 0.5) * h
}

/// `(1/T) ‖∫_{t−T}^{t} θ − ∫_{t−2T}^{t−T} θ‖` from the last `2N+1` samples.
pub fn stopping_metric(samples: &[DVector<f64>], h: f64, window: f64) -> Result<f64, OnlineError> {
    let n = steps_in(window, h)?;
    let needed = 2 * n + 1;
    if samples.len() < needed {
        return Err(OnlineError::InsufficientHistory { needed, have: samples.len() });
    }
    let s = &samples[samples.len() - needed..];
    let i0 = trapz(&s[..=n], h);
    let i1 = trapz(&s[n..], h);
    Ok((i1 - i0).norm() / window)
}

/// Ring buffer over `[t − 2T, t]` with running sums for the two half-window integrals.
#[derive(Debug, Clone)]
pub struct WindowMetric {
    half: usize,
    h: f64,
    window: f64,
    buf: VecDeque<DVector<f64>>,
    sum_a: DVector<f64>,
    sum_b: DVector<f64>,
    pushes: usize,
}

impl WindowMetric {
    pub fn new(dim: usize, h: f64, window: f64) -> Result<Self, OnlineError> {
        let half = steps_in(window, h)?;
        Ok(WindowMetric {
            half,
            h,
            window,
            buf: VecDeque::with_capacity(2 * half + 2),
            sum_a: DVector::zeros(dim),
            sum_b: DVector::zeros(dim),
            pushes: 0,
        })
    }

    pub fn push(&mut self, v: &DVector<f64>) {
        let n = self.half;
        if self.buf.len() == 2 * n + 1 {
            let old0 = self.buf.pop_front().expect("full buffer");
            self.sum_a -= &old0;
            // element entering the first half from the second
            self.sum_a += &self.buf[n];
            self.sum_b -= &self.buf[n - 1];
        }
        self.buf.push_back(v.clone());
        let len = self.buf.len();
        if len <= n + 1 {
            self.sum_a += v;
        }
        if len > n {
            self.sum_b += v;
        }
        self.pushes += 1;
        if self.pushes.is_multiple_of(4096) {
            self.resum();
        }
    }

    fn resum(&mut self) {
        let n = self.half;
        let d = self.sum_a.len();
        self.sum_a = DVector::zeros(d);
        self.sum_b = DVector::zeros(d);
        for (k, v) in self.buf.iter().enumerate() {
            if k <= n {
                self.sum_a += v;
            }
            if k >= n {
                self.sum_b += v;
            }
        }
    }

    pub fn metric(&self) -> Option<f64> {
        let n = self.half;
        if self.buf.len() < 2 * n + 1 {
            return None;
        }
        let ia = (&self.sum_a - (&self.buf[0] + &self.buf[n]) * 0.5) * self.h;
        let ib = (&self.sum_b - (&self.buf[n] + &self.buf[2 * n]) * 0.5) * self.h;
        Some((ib - ia).norm() / self.window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub window: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above `rel_tol · λ_max`.
    pub excited_dim: usize,
    pub rel_tol: f64,
}

/// Eigen-analysis of the trapezoidal `∫ Mᵀ M dτ` over the sampled regressors.
pub fn pe_diagnostic(regressors: &[DMatrix<f64>], h: f64, rel_tol: f64) -> PeReport {
    let d = regressors.first().map_or(0, |m| m.ncols());
    let mut info = DMatrix::zeros(d, d);
    let n = regressors.len();
    for (k, m) in regressors.iter().enumerate() {
        let w = if k == 0 || k + 1 == n { 0.5 } else { 1.0 };
        info += m.transpose() * m * (w * h);
    }
    let mut eig: Vec<f64> = if d > 0 { SymmetricEigen::new(info).eigenvalues.iter().copied().collect() } else { vec![] };
    eig.sort_by(|a, b| b.total_cmp(a));
    let lambda_max = eig.first().copied().unwrap_or(0.0).max(0.0);
    let lambda_min = eig.last().copied().unwrap_or(0.0).max(0.0);
    let excited_dim = eig.iter().filter(|&&l| lambda_max > 0.0 && l > rel_tol * lambda_max).count();
    PeReport {
        window: if n > 1 { (n - 1) as f64 * h } else { 0.0 },
        lambda_min,
        lambda_max,
        eigenvalues: eig,
        excited_dim,
        rel_tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub t: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerOnline {
    pub theta_bar: Vec<f64>,
    pub theta_r: Option<Vec<f64>>,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub fne_freeze: Option<f64>,
    pub hjb_freeze: Option<f64>,
    pub last_metric_fne: Option<f64>,
    pub last_metric_hjb: Option<f64>,
    pub membership_residual: Option<f64>,
    pub offline_theta_bar: Option<Vec<f64>>,
    pub theta_bar_gap: Option<f64>,
    pub discrepancy: bool,
    pub pe: Option<PeReport>,
    /// Componentwise min and max of `η̂` after the first stopping window (empty if never sampled).
    pub eta_min: Vec<f64>,
    pub eta_max: Vec<f64>,
    /// Traced samples where an own control weight went negative.
    pub negative_alpha: Vec<NegativeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub steps: usize,
    pub end_time: f64,
    pub all_frozen: bool,
    pub horizon_exhausted: bool,
    pub failure: Option<String>,
    pub players: Vec<PlayerOnline>,
    pub forward: Option<ForwardCheck>,
    pub forward_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub player: usize,
    pub theta_bar: Vec<f64>,
    pub eta: Vec<f64>,
    pub metric_fne: Option<f64>,
    pub metric_hjb: Option<f64>,
    pub frozen_fne: bool,
    pub frozen_hjb: bool,
}

pub struct OnlineRun {
    pub report: OnlineReport,
    pub trace: Vec<TraceRow>,
}

struct Learner {
    st: FneStructure,
    ctx: HjbContext,
    theta_bar: DVector<f64>,
    eta: DVector<f64>,
    win_fne: WindowMetric,
    win_hjb: WindowMetric,
    fne_freeze: Option<f64>,
    hjb_freeze: Option<f64>,
    pe_buf: VecDeque<DMatrix<f64>>,
    pe: Option<PeReport>,
    eta_min: DVector<f64>,
    eta_max: DVector<f64>,
    negative: Vec<NegativeSample>,
}

const PE_REL_TOL: f64 = 1e-9;

/// Run the online learner. `offline` supplies the solution sets for the
/// membership check and the offline `θ̄` for the discrepancy flag.
pub fn run_online(sc: &Scenario, offline: Option<&OfflineRun>) -> Result<OnlineRun, OnlineError> {
    let cfg = &sc.online;
    let model = &sc.model;
    let dynm = &model.dynamics;
    let np = model.n_players();
    cfg.check(np)?;
    let h = cfg.h;
    let mu_star = model.gt_strategies()?;
    let grid = model.domain.grid();
    let mut probes = grid.clone();
    probes.extend(sc.plan.inits.iter().cloned());
    let p_total = dynm.p_total();

    let mut learners = Vec::with_capacity(np);
    for (i, pl) in model.players.iter().enumerate() {
        let split = split_basis(&pl.phi, &dynm.g[i], &probes, sc.offline.split_tol)?;
        let st = fne_structure(&pl.phi, &dynm.g[i], &split)?;
        let ctx = HjbContext::new(HjbMode::Reduced, split.clone(), &pl.phi, &pl.psi, dynm.n, p_total, sc.cost_offsets[i].clone())?;
        let d_eta = ctx.eta_len();
        let d_th = st.p * st.hbar;
        learners.push(Learner {
            win_fne: WindowMetric::new(d_th, h, cfg.window)?,
            win_hjb: WindowMetric::new(d_eta, h, cfg.window)?,
            theta_bar: DVector::zeros(d_th),
            eta: DVector::zeros(d_eta),
            st,
            ctx,
            fne_freeze: None,
            hjb_freeze: None,
            pe_buf: VecDeque::new(),
            pe: None,
            eta_min: DVector::from_element(d_eta, f64::INFINITY),
            eta_max: DVector::from_element(d_eta, f64::NEG_INFINITY),
            negative: vec![],
        });
    }
    let pe_len = steps_in(cfg.pe_window, h)? + 1;
    let seg_steps = steps_in(sc.plan.segment_t, h)?;
    let total = steps_in(cfg.horizon, h)?;
    if sc.plan.inits.is_empty() {
        return Err(OnlineError::Config("no initial states".into()));
    }

    let mut trace = vec![];
    let mut x = DVector::zeros(dynm.n);
    let mut freqs: Vec<Vec<f64>> = vec![];
    let mut failure = None;
    let mut k = 0;
    while k < total {
        let seg = k / seg_steps;
        let kl = k % seg_steps;
        if kl == 0 {
            x = DVector::from_column_slice(&sc.plan.inits[seg % sc.plan.inits.len()]);
            freqs = (0..dynm.n).map(|c| excitation_freqs(&cfg.excitation, sc.seed, c, seg)).collect();
        }
        let t = k as f64 * h;
        let tl = kl as f64 * h;
        let u_star = eval_strategies(&mu_star, x.as_slice())?;

        // strategy-weight laws
        for (i, l) in learners.iter_mut().enumerate() {
            if l.fne_freeze.is_none() {
                let off = dynm.offset(i);
                let ui = u_star.rows(off, l.st.p).into_owned();
                fne_adapt_step(&mut l.theta_bar, &l.st, x.as_slice(), &ui, h, cfg.tau[i], cfg.fne_integrator)?;
                if !l.theta_bar.iter().all(|v| v.is_finite()) {
                    failure = Some(OnlineError::NonFinite { player: i, t }.to_string());
                }
            }
        }

        // HJB laws at the excitation state
        let x_eval: Vec<f64> = freqs
            .iter()
            .map(|fs| fs.iter().map(|f| cfg.excitation.amplitude * (2.0 * std::f64::consts::PI * f * tl).sin()).sum())
            .collect();
        let mut u_hat = DVector::zeros(p_total);
        for (i, l) in learners.iter().enumerate() {
            let ui = l.st.regressor(&x_eval)? * &l.theta_bar;
            u_hat.rows_mut(dynm.offset(i), l.st.p).copy_from(&ui);
        }
        for (i, l) in learners.iter_mut().enumerate() {
            if l.hjb_freeze.is_some() {
                continue;
            }
            let Ok((theta_r, _)) = reduce_theta(&l.theta_bar, l.st.p, l.st.hbar) else {
                continue;
            };
            let row = hjb_adapt_step(
                &mut l.eta,
                &l.ctx,
                dynm,
                &x_eval,
                &u_hat,
                &theta_r,
                h,
                cfg.kappa[i],
                cfg.hjb_integrator,
            )?;
            if !l.eta.iter().all(|v| v.is_finite()) {
                failure = Some(OnlineError::NonFinite { player: i, t }.to_string());
            }
            if l.pe_buf.len() == pe_len {
                l.pe_buf.pop_front();
            }
            l.pe_buf.push_back(DMatrix::from_row_slice(1, row.len(), row.as_slice()));
        }
        if failure.is_some() {
            break;
        }

        // stopping criteria and bookkeeping
        let mut all_frozen = true;
        for (i, l) in learners.iter_mut().enumerate() {
            if l.fne_freeze.is_none() {
                l.win_fne.push(&l.theta_bar);
                if l.win_fne.metric().is_some_and(|m| m < cfg.threshold) {
                    l.fne_freeze = Some(t);
                }
            }
            if l.hjb_freeze.is_none() {
                l.win_hjb.push(&l.eta);
                if l.win_hjb.metric().is_some_and(|m| m < cfg.threshold) {
                    l.hjb_freeze = Some(t);
                    l.pe = Some(pe_diagnostic(l.pe_buf.make_contiguous(), h, PE_REL_TOL));
                }
            }
            all_frozen &= l.fne_freeze.is_some() && l.hjb_freeze.is_some();
            if t >= cfg.window {
                l.eta_min = l.eta_min.inf(&l.eta);
                l.eta_max = l.eta_max.sup(&l.eta);
            }
            if k % cfg.trace_every == 0 {
                let off = dynm.offset(i);
                let alpha_own: Vec<f64> = l.eta.rows(off, l.st.p).iter().copied().collect();
                if alpha_own.iter().any(|a| *a < 0.0) {
                    l.negative.push(NegativeSample { t, alpha: l.eta.rows(0, p_total).iter().copied().collect() });
                }
                trace.push(TraceRow {
                    t,
                    player: i,
                    theta_bar: l.theta_bar.iter().copied().collect(),
                    eta: l.eta.iter().copied().collect(),
                    metric_fne: l.win_fne.metric(),
                    metric_hjb: l.win_hjb.metric(),
                    frozen_fne: l.fne_freeze.is_some(),
                    frozen_hjb: l.hjb_freeze.is_some(),
                });
            }
        }
        k += 1;
        if all_frozen {
            break;
        }
        x = rk4_step(|y| closed_loop_rhs(dynm, &mu_star, y), &x, h)?;
        if !x.iter().all(|v| v.is_finite()) {
            failure = Some(SimError::Diverged { t: t + h }.to_string());
            break;
        }
    }
    let end_time = k as f64 * h;
    let all_frozen = learners.iter().all(|l| l.fne_freeze.is_some() && l.hjb_freeze.is_some());

    let mut players = Vec::with_capacity(np);
    for (i, l) in learners.iter_mut().enumerate() {
        if l.pe.is_none() && !l.pe_buf.is_empty() {
            l.pe = Some(pe_diagnostic(l.pe_buf.make_contiguous(), h, PE_REL_TOL));
        }
        let alpha: Vec<f64> = l.eta.rows(0, p_total).iter().copied().collect();
        let beta: Vec<f64> = l.eta.rows(p_total, l.ctx.psi.len()).iter().copied().collect();
        let ab = l.eta.rows(0, p_total + l.ctx.psi.len()).into_owned();
        let off_player = offline.map(|o| &o.report.players[i]);
        let membership = offline.and_then(|o| {
            let set = &o.sets[i];
            // sets are only comparable when they share the unknown layout
            (set.mode == HjbMode::Reduced && set.particular.len() == l.eta.len()).then(|| membership_residual_ab(set, &ab))
        });
        let offline_theta_bar = off_player.map(|p| p.fne.theta_bar.clone());
        let gap = offline_theta_bar.as_ref().and_then(|ot| {
            (ot.len() == l.theta_bar.len())
                .then(|| ot.iter().zip(l.theta_bar.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        });
        let seen = l.eta_min.iter().all(|v| v.is_finite());
        let band = |v: &DVector<f64>| if seen { v.iter().copied().collect() } else { vec![] };
        players.push(PlayerOnline {
            theta_bar: l.theta_bar.iter().copied().collect(),
            theta_r: reduce_theta(&l.theta_bar, l.st.p, l.st.hbar).ok().map(|(t, _)| t.iter().copied().collect()),
            eta: l.eta.iter().copied().collect(),
            alpha,
            beta,
            fne_freeze: l.fne_freeze,
            hjb_freeze: l.hjb_freeze,
            last_metric_fne: l.win_fne.metric(),
            last_metric_hjb: l.win_hjb.metric(),
            membership_residual: membership,
            offline_theta_bar,
            theta_bar_gap: gap,
            discrepancy: gap.is_some_and(|g| g > cfg.discrepancy_tol),
            pe: l.pe.clone(),
            eta_min: band(&l.eta_min),
            eta_max: band(&l.eta_max),
            negative_alpha: std::mem::take(&mut l.negative),
        });
    }

    let (forward, forward_error) = if failure.is_none() {
        let params: Vec<(Vec<f64>, Vec<f64>)> = players.iter().map(|p| (p.alpha.clone(), p.beta.clone())).collect();
        let mu_hat: Vec<ExprVec> = learners.iter().map(|l| l.st.strategy(l.theta_bar.as_slice())).collect();
        let gt = match offline {
            Some(o) => o.gt.clone(),
            None => generate_gt(sc)?,
        };
        match forward_verify(sc, &params, mu_hat, &gt, sc.offline.pi) {
            Ok((c, _)) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    Ok(OnlineRun {
        report: OnlineReport {
            steps: k,
            end_time,
            all_frozen,
            horizon_exhausted: !all_frozen && failure.is_none(),
            failure,
            players,
            forward,
            forward_error,
        },
        trace,
    })
}
