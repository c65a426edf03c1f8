//! Closed-loop RK4 simulation with periodic state resets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::expr::{ExprError, ExprVec};
use crate::game::{eval_strategies, Dynamics};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("state diverged at t = {t}")]
    Diverged { t: f64 },
    #[error("expression failed at t = {t}: {source}")]
    Expr { t: f64, source: ExprError },
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Segment (reset) index of every step.
    pub segment: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }

    pub fn p(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    /// Step ranges of every segment, in order.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![];
        let mut start = 0;
        for k in 1..=self.len() {
            if k == self.len() || self.segment[k] != self.segment[start] {
                out.push(start..k);
                start = k;
            }
        }
        out
    }
}

/// Number of integer steps of size `h` in `span`, or an error if `span` is not a multiple.
pub fn steps_in(span: f64, h: f64) -> Result<usize, SimError> {
    if !(h > 0.0) || !(span > 0.0) {
        return Err(SimError::Config(format!("need positive span and step, got {span} and {h}")));
    }
    let k = (span / h).round();
    if ((span / h) - k).abs() > 1e-6 {
        return Err(SimError::Config(format!("{span} is not a multiple of {h}")));
    }
    Ok(k as usize)
}

/// One classical Runge–Kutta step.
pub fn rk4_step<F, E>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (h / 2.0)))?;
    let k3 = f(&(x + &k2 * (h / 2.0)))?;
    let k4 = f(&(x + &k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Closed-loop right-hand side `f(x) + Σ G_i(x) μ_i(x)`.
pub fn closed_loop_rhs(dynm: &Dynamics, strategies: &[ExprVec], x: &DVector<f64>) -> Result<DVector<f64>, ExprError> {
    let u = eval_strategies(strategies, x.as_slice())?;
    dynm.rhs(x.as_slice(), &u)
}

/// Integrate the closed loop from each initial state for `segment_t` seconds.
/// Steps are recorded at the left end of every interval.
pub fn integrate_closed_loop(
    dynm: &Dynamics,
    strategies: &[ExprVec],
    inits: &[Vec<f64>],
    segment_t: f64,
    h: f64,
) -> Result<Trajectory, SimError> {
    let steps = steps_in(segment_t, h)?;
    let total = steps * inits.len();
    let mut tr = Trajectory {
        h,
        t: Vec::with_capacity(total),
        x: Vec::with_capacity(total),
        u: Vec::with_capacity(total),
        segment: Vec::with_capacity(total),
    };
    for (s, x0) in inits.iter().enumerate() {
        if x0.len() != dynm.n {
            return Err(SimError::Config(format!("initial state {} has dimension {}", s + 1, x0.len())));
        }
        let mut x = DVector::from_column_slice(x0);
        for k in 0..steps {
            let t = s as f64 * segment_t + k as f64 * h;
            let u = eval_strategies(strategies, x.as_slice()).map_err(|source| SimError::Expr { t, source })?;
            tr.t.push(t);
            tr.x.push(x.clone());
            tr.u.push(u);
            tr.segment.push(s);
            x = rk4_step(|y| closed_loop_rhs(dynm, strategies, y), &x, h).map_err(|source| SimError::Expr { t, source })?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(SimError::Diverged { t: t + h });
            }
        }
    }
    Ok(tr)
}

const STENCIL: usize = 6;

fn lagrange_weights(nodes: [f64; STENCIL], s: f64) -> [f64; STENCIL] {
    let mut w = [1.0; STENCIL];
    for i in 0..STENCIL {
        for j in 0..STENCIL {
            if i != j {
                w[i] *= (s - nodes[j]) / (nodes[i] - nodes[j]);
            }
        }
    }
    w
}

/// Control at fractional step `k + s` of one segment, quintic through the six nearest samples.
fn interp_control(u: &[DVector<f64>], k: usize, s: f64) -> DVector<f64> {
    let n = u.len();
    if n < STENCIL {
        return u[k.min(n - 1)].clone();
    }
    let start = k.saturating_sub(STENCIL / 2 - 1).min(n - STENCIL);
    let nodes: [f64; STENCIL] = std::array::from_fn(|j| (start + j) as f64 - k as f64);
    let w = lagrange_weights(nodes, s);
    (0..STENCIL).fold(DVector::zeros(u[0].len()), |acc, j| acc + &u[start + j] * w[j])
}

/// Re-integrate the recorded controls open loop (RK4, quintic control interpolation).
pub fn replay_open_loop(dynm: &Dynamics, traj: &Trajectory) -> Result<Vec<DVector<f64>>, SimError> {
    let h = traj.h;
    let mut out = Vec::with_capacity(traj.len());
    for seg in traj.segments() {
        let u = &traj.u[seg.clone()];
        let mut x = traj.x[seg.start].clone();
        for k in 0..u.len() {
            let t = traj.t[seg.start + k];
            out.push(x.clone());
            let f = |y: &DVector<f64>, s: f64| dynm.rhs(y.as_slice(), &interp_control(u, k, s));
            let k1 = f(&x, 0.0);
            let step = (|| {
                let k1 = k1?;
                let k2 = f(&(&x + &k1 * (h / 2.0)), 0.5)?;
                let k3 = f(&(&x + &k2 * (h / 2.0)), 0.5)?;
                let k4 = f(&(&x + &k3 * h), 1.0)?;
                Ok::<_, ExprError>(&x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
            })();
            x = step.map_err(|source| SimError::Expr { t, source })?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

/// Sampled demonstrations, one entry per reset segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstrations {
    pub dt: f64,
    pub segments: Vec<Vec<Sample>>,
}

impl Demonstrations {
    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.segments.iter().flatten()
    }

    pub fn count(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

pub fn sample(traj: &Trajectory, dt: f64) -> Result<Demonstrations, SimError> {
    let stride = steps_in(dt, traj.h)?;
    let segments = traj
        .segments()
        .into_iter()
        .map(|r| {
            r.step_by(stride)
                .map(|k| Sample { x: traj.x[k].clone(), u: traj.u[k].clone() })
                .collect()
        })
        .collect();
    Ok(Demonstrations { dt, segments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nsae {
    pub dx: f64,
    pub du: f64,
    /// Channels whose reference is identically zero (normalized by 1).
    pub zero_reference_channels: Vec<String>,
}

fn nsae_channels(r: &[DVector<f64>], e: &[DVector<f64>], tag: &str, flags: &mut Vec<String>) -> f64 {
    let dim = r.first().map_or(0, |v| v.len());
    let mut total = 0.0;
    for j in 0..dim {
        let mut mx = r.iter().map(|v| v[j].abs()).fold(0.0, f64::max);
        if mx == 0.0 {
            flags.push(format!("{tag}{}", j + 1));
            mx = 1.0;
        }
        let s: f64 = r.iter().zip(e).map(|(a, b)| (b[j] - a[j]).abs()).sum();
        total += s / mx;
    }
    total
}

/// Normalized sum of absolute errors between a reference and an estimate.
pub fn nsae(reference: &Trajectory, estimate: &Trajectory) -> Result<Nsae, SimError> {
    if reference.len() != estimate.len()
        || (reference.h - estimate.h).abs() > 1e-15
        || reference.n() != estimate.n()
        || reference.p() != estimate.p()
    {
        return Err(SimError::Config("trajectories are on different grids".into()));
    }
    let mut flags = vec![];
    let dx = nsae_channels(&reference.x, &estimate.x, "x", &mut flags);
    let du = nsae_channels(&reference.u, &estimate.u, "u", &mut flags);
    Ok(Nsae { dx, du, zero_reference_channels: flags })
}
