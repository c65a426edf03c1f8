//! Scenario files: JSON description of a game, its ground truth, the
//! demonstration plan and the offline/online settings.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::expr::{parse, Expr, ExprError, ExprMat, ExprVec};
use crate::forward::PiOptions;
use crate::game::{validate, Diagnostics, DomainBox, Dynamics, GameError, GameModel, GroundTruth, PlayerModel};
use crate::offline::WSpec;
use crate::online::{ExcitationSpec, Integrator, OnlineConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema violation at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("parse error in `{path}`: {source}")]
    Expr { path: String, source: ExprError },
    #[error("dimension mismatch at `{path}`: {msg}")]
    Dimension { path: String, msg: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsFile {
    pub f: Vec<String>,
    /// One matrix per player, rows of expressions.
    pub g: Vec<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerFile {
    pub phi: Vec<String>,
    pub psi: Vec<String>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Ground-truth value function, used instead of `theta` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// Unmodeled cost term subtracted from the HJB target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_offset: Option<String>,
    #[serde(default)]
    pub w: WSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub inits: Vec<Vec<f64>>,
    pub segment_t: f64,
    pub h: f64,
    pub dt: f64,
}

fn default_rtol() -> f64 {
    1e-8
}
fn default_split_tol() -> f64 {
    1e-9
}
fn default_pi_tol() -> f64 {
    1e-6
}
fn default_pi_iter() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineFile {
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_split_tol")]
    pub split_tol: f64,
    #[serde(default = "default_pi_tol")]
    pub pi_tol: f64,
    #[serde(default = "default_pi_iter")]
    pub pi_max_iter: usize,
}

impl Default for OfflineFile {
    fn default() -> Self {
        OfflineFile { rtol: 1e-8, split_tol: 1e-9, pi_tol: 1e-6, pi_max_iter: 100 }
    }
}

fn default_online() -> OnlineFile {
    OnlineFile::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineFile {
    /// Per-player rates; a single entry is broadcast to all players.
    pub tau: Vec<f64>,
    pub kappa: Vec<f64>,
    pub h: f64,
    pub window: f64,
    pub threshold: f64,
    pub horizon: f64,
    pub fne_integrator: Integrator,
    pub hjb_integrator: Integrator,
    pub excitation: ExcitationSpec,
    pub trace_every: usize,
    pub pe_window: f64,
    pub discrepancy_tol: f64,
}

impl Default for OnlineFile {
    fn default() -> Self {
        OnlineFile {
            tau: vec![50.0],
            kappa: vec![5.0],
            h: 1e-3,
            window: 1.0,
            threshold: 1e-3,
            horizon: 16.0,
            fne_integrator: Integrator::Euler,
            hjb_integrator: Integrator::Euler,
            excitation: ExcitationSpec::default(),
            trace_every: 10,
            pe_window: 1.0,
            discrepancy_tol: 0.05,
        }
    }
}

/// Verification parameters for `verify`; defaults to the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyPlayer {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub dynamics: DynamicsFile,
    pub players: Vec<PlayerFile>,
    pub domain: DomainBox,
    pub plan: PlanFile,
    #[serde(default)]
    pub offline: OfflineFile,
    #[serde(default = "default_online")]
    pub online: OnlineFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<Vec<VerifyPlayer>>,
}

#[derive(Debug, Clone)]
pub struct DemoPlan {
    pub inits: Vec<Vec<f64>>,
    pub segment_t: f64,
    pub h: f64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct OfflineOptions {
    pub rtol: f64,
    pub split_tol: f64,
    pub pi: PiOptions,
    pub w: Vec<WSpec>,
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub name: String,
    pub seed: u64,
    pub model: GameModel,
    pub plan: DemoPlan,
    pub offline: OfflineOptions,
    pub online: OnlineConfig,
    pub cost_offsets: Vec<Option<Expr>>,
    pub diagnostics: Diagnostics,
}

fn parse_at(src: &str, path: String) -> Result<Expr, ScenarioError> {
    parse(src).map_err(|source| ScenarioError::Expr { path, source })
}

fn parse_vec(srcs: &[String], path: &str) -> Result<ExprVec, ScenarioError> {
    srcs.iter()
        .enumerate()
        .map(|(k, s)| parse_at(s, format!("{path}[{k}]")))
        .collect::<Result<Vec<_>, _>>()
        .map(ExprVec::new)
}

fn dim_err(path: impl Into<String>, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Dimension { path: path.into(), msg: msg.into() }
}

fn broadcast(v: &[f64], n: usize, path: &str) -> Result<Vec<f64>, ScenarioError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        k if k == n => Ok(v.to_vec()),
        k => Err(dim_err(path, format!("{k} entries for {n} players"))),
    }
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Version(file.schema_version));
        }
        let f = parse_vec(&file.dynamics.f, "dynamics.f")?;
        let n = f.len();
        let mut g = Vec::new();
        for (i, rows) in file.dynamics.g.iter().enumerate() {
            let path = format!("dynamics.g[{i}]");
            let mut data = Vec::new();
            let cols = rows.first().map_or(0, Vec::len);
            if rows.len() != n {
                return Err(dim_err(&path, format!("{} rows, state dimension is {n}", rows.len())));
            }
            for (r, row) in rows.iter().enumerate() {
                if row.len() != cols {
                    return Err(dim_err(format!("{path}[{r}]"), format!("{} columns, expected {cols}", row.len())));
                }
                for (c, s) in row.iter().enumerate() {
                    data.push(parse_at(s, format!("{path}[{r}][{c}]"))?);
                }
            }
            g.push(ExprMat::new(n, cols, data).map_err(|e| dim_err(&path, e.to_string()))?);
        }
        let dynamics = Dynamics::new(f, g).map_err(|e| dim_err("dynamics", e.to_string()))?;
        let np = dynamics.players();
        if file.players.len() != np {
            return Err(dim_err("players", format!("{} players but {np} input matrices", file.players.len())));
        }
        let p_total = dynamics.p_total();

        let mut players = Vec::new();
        let mut values = Vec::new();
        let mut cost_offsets = Vec::new();
        for (i, pf) in file.players.iter().enumerate() {
            let base = format!("players[{i}]");
            let phi = parse_vec(&pf.phi, &format!("{base}.phi"))?;
            let psi = parse_vec(&pf.psi, &format!("{base}.psi"))?;
            if pf.alpha.len() != p_total {
                return Err(dim_err(format!("{base}.alpha"), format!("length {} but p = {p_total}", pf.alpha.len())));
            }
            if pf.beta.len() != psi.len() {
                return Err(dim_err(format!("{base}.beta"), format!("length {} but psi has {}", pf.beta.len(), psi.len())));
            }
            if let Some(t) = &pf.theta {
                if t.len() != phi.len() {
                    return Err(dim_err(format!("{base}.theta"), format!("length {} but phi has {}", t.len(), phi.len())));
                }
            }
            for (path, e) in [("phi", &phi), ("psi", &psi)] {
                if e.arity() > n {
                    return Err(dim_err(format!("{base}.{path}"), format!("references x{} but n = {n}", e.arity())));
                }
            }
            values.push(pf.value.as_ref().map(|s| parse_at(s, format!("{base}.value"))).transpose()?);
            cost_offsets.push(pf.cost_offset.as_ref().map(|s| parse_at(s, format!("{base}.cost_offset"))).transpose()?);
            players.push(PlayerModel {
                phi,
                psi,
                alpha: DVector::from_vec(pf.alpha.clone()),
                beta: DVector::from_vec(pf.beta.clone()),
                theta: pf.theta.as_ref().map(|t| DVector::from_vec(t.clone())),
            });
        }
        let truth = if values.iter().all(Option::is_some) && !values.is_empty() {
            GroundTruth::Expressions(values.into_iter().flatten().collect())
        } else if values.iter().any(Option::is_some) {
            return Err(dim_err("players", "either every player or none gives a `value` expression"));
        } else {
            if let Some(i) = players.iter().position(|p| p.theta.is_none()) {
                return Err(dim_err(format!("players[{i}]"), "ground truth needs `theta` or `value`"));
            }
            GroundTruth::Parameters
        };

        let d = &file.domain;
        if d.lower.len() != n {
            return Err(dim_err("domain", format!("{}-dimensional box for n = {n}", d.lower.len())));
        }
        d.check().map_err(|e: GameError| dim_err("domain", e.to_string()))?;
        for (k, x0) in file.plan.inits.iter().enumerate() {
            if x0.len() != n {
                return Err(dim_err(format!("plan.inits[{k}]"), format!("length {} for n = {n}", x0.len())));
            }
        }
        if file.plan.inits.is_empty() {
            return Err(dim_err("plan.inits", "at least one initial state is required"));
        }
        for (path, v) in [("plan.h", file.plan.h), ("plan.dt", file.plan.dt), ("plan.segment_t", file.plan.segment_t)] {
            if !(v > 0.0) {
                return Err(dim_err(path, "must be positive"));
            }
        }

        let model = GameModel { dynamics, players, domain: d.clone(), truth };
        let diagnostics = validate(&model);
        if diagnostics.hard_failure() {
            let msg: Vec<String> = diagnostics.failures().filter(|c| c.hard).map(|c| format!("{}: {}", c.name, c.detail)).collect();
            return Err(ScenarioError::Model(msg.join("; ")));
        }

        let o = &file.online;
        let online = OnlineConfig {
            tau: broadcast(&o.tau, np, "online.tau")?,
            kappa: broadcast(&o.kappa, np, "online.kappa")?,
            h: o.h,
            window: o.window,
            threshold: o.threshold,
            horizon: o.horizon,
            fne_integrator: o.fne_integrator,
            hjb_integrator: o.hjb_integrator,
            excitation: o.excitation.clone(),
            trace_every: o.trace_every,
            pe_window: o.pe_window,
            discrepancy_tol: o.discrepancy_tol,
        };
        online.check(np).map_err(|e| ScenarioError::Schema { path: "online".into(), msg: e.to_string() })?;
        if let Some(v) = &file.verify {
            if v.len() != np {
                return Err(dim_err("verify", format!("{} entries for {np} players", v.len())));
            }
        }

        Ok(Scenario {
            name: file.name.clone(),
            seed: file.seed,
            plan: DemoPlan {
                inits: file.plan.inits.clone(),
                segment_t: file.plan.segment_t,
                h: file.plan.h,
                dt: file.plan.dt,
            },
            offline: OfflineOptions {
                rtol: file.offline.rtol,
                split_tol: file.offline.split_tol,
                pi: PiOptions { tol: file.offline.pi_tol, max_iter: file.offline.pi_max_iter, rtol: file.offline.rtol },
                w: file.players.iter().map(|p| p.w.clone()).collect(),
            },
            online,
            cost_offsets,
            diagnostics,
            model,
            file,
        })
    }

    pub fn from_value(v: Value) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_path_to_error::deserialize(v).map_err(|e| ScenarioError::Schema {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        Scenario::from_file(file)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            msg: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Scenario::from_value(v)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Scenario::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("scenario serializes")
    }
}

/// Apply `a.b.0.c=value`; the value is read as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ScenarioError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ScenarioError::Override(spec.into()))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        cur = match cur {
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| ScenarioError::Override(spec.into()))?;
                a.get_mut(idx).ok_or_else(|| ScenarioError::Override(spec.into()))?
            }
            Value::Object(m) => {
                if last {
                    m.insert(part.to_string(), Value::Null);
                }
                m.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(ScenarioError::Override(spec.into())),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Err(ScenarioError::Override(spec.into()))
}

/// Bundled fixtures for the two-player example system.
pub mod fixtures {
    pub const ERROR_FREE: &str = include_str!("../scenarios/two_player_errorfree.json");
    pub const VALUE_ERROR: &str = include_str!("../scenarios/two_player_value_error.json");
    pub const COST_ERROR: &str = include_str!("../scenarios/two_player_cost_error.json");

    pub fn all() -> [(&'static str, &'static str); 3] {
        [("two_player_errorfree", ERROR_FREE), ("two_player_value_error", VALUE_ERROR), ("two_player_cost_error", COST_ERROR)]
    }
}
