//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Every operation takes and returns JSON strings. The `*_json` functions
//! hold the logic and are callable natively; the exported wrappers only
//! convert errors into `JsValue`.

use idg::offline::{generate_gt, run_offline, SetSummary};
use idg::online::{excitation, excitation_freqs, ExcitationSpec};
use idg::scenario::{fixtures, Scenario};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Bundled error-free example scenario.
#[wasm_bindgen]
pub fn example_scenario() -> String {
    fixtures::ERROR_FREE.to_string()
}

#[derive(Serialize)]
struct TrajectoryView {
    t: Vec<f64>,
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

/// Ground-truth closed-loop trajectory, keeping every `stride`-th step.
pub fn simulate_json(scenario: &str, stride: usize) -> Result<String, String> {
    let sc = Scenario::from_json(scenario, &[]).map_err(|e| e.to_string())?;
    let tr = generate_gt(&sc).map_err(|e| e.to_string())?;
    let stride = stride.max(1);
    let idx: Vec<usize> = (0..tr.len()).step_by(stride).collect();
    let view = TrajectoryView {
        t: idx.iter().map(|&k| tr.t[k]).collect(),
        x: idx.iter().map(|&k| tr.x[k].iter().copied().collect()).collect(),
        u: idx.iter().map(|&k| tr.u[k].iter().copied().collect()).collect(),
    };
    Ok(serde_json::to_string(&view).expect("trajectory serializes"))
}

#[derive(Serialize)]
struct PlayerSetView {
    set: SetSummary,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    theta_bar: Vec<f64>,
}

/// Offline identification; returns each player's solution set.
pub fn offline_sets_json(scenario: &str) -> Result<String, String> {
    let sc = Scenario::from_json(scenario, &[]).map_err(|e| e.to_string())?;
    let run = run_offline(&sc).map_err(|e| e.to_string())?;
    let view: Vec<PlayerSetView> = run
        .report
        .players
        .iter()
        .map(|p| PlayerSetView {
            set: p.set.clone(),
            alpha: p.selection.alpha.clone(),
            beta: p.selection.beta.clone(),
            theta_bar: p.fne.theta_bar.clone(),
        })
        .collect();
    Ok(serde_json::to_string(&view).expect("sets serialize"))
}

/// Element `w` of a solution set previously returned by [`offline_sets_json`].
pub fn set_element_json(set: &str, w: &[f64]) -> Result<String, String> {
    let summary: SetSummary = serde_json::from_str(set).map_err(|e| e.to_string())?;
    if w.len() != summary.null_basis.len() {
        return Err(format!("w has {} entries, set is {}-dimensional", w.len(), summary.null_basis.len()));
    }
    let eta: Vec<f64> = summary.to_set().element(w).iter().copied().collect();
    Ok(serde_json::to_string(&eta).expect("vector serializes"))
}

#[derive(Serialize)]
struct ExcitationView {
    freqs: Vec<f64>,
    t: Vec<f64>,
    e: Vec<f64>,
}

/// Excitation signal of one channel after reset `reset`, sampled on `[0, t_end]`.
pub fn excitation_json(seed: u64, channel: usize, reset: usize, t_end: f64, samples: usize) -> Result<String, String> {
    if !(t_end.is_finite() && t_end > 0.0) || samples < 2 {
        return Err("need t_end > 0 and at least two samples".into());
    }
    let spec = ExcitationSpec::default();
    let t: Vec<f64> = (0..samples).map(|k| t_end * k as f64 / (samples - 1) as f64).collect();
    let e = t.iter().map(|&s| excitation(s, &spec, seed, channel, reset)).collect();
    let view = ExcitationView { freqs: excitation_freqs(&spec, seed, channel, reset), t, e };
    Ok(serde_json::to_string(&view).expect("excitation serializes"))
}

#[wasm_bindgen]
pub fn simulate(scenario: &str, stride: usize) -> Result<String, JsValue> {
    simulate_json(scenario, stride).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn offline_sets(scenario: &str) -> Result<String, JsValue> {
    offline_sets_json(scenario).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn set_element(set: &str, w: Vec<f64>) -> Result<String, JsValue> {
    set_element_json(set, &w).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn excitation_signal(seed: u64, channel: usize, reset: usize, t_end: f64, samples: usize) -> Result<String, JsValue> {
    excitation_json(seed, channel, reset, t_end, samples).map_err(|e| JsValue::from_str(&e))
}
