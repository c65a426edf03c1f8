//! Command implementations behind the `idg` binary and their file outputs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::game::Diagnostics;
use crate::offline::{forward_verify, generate_gt, run_offline, ForwardCheck, OfflineError, OfflineReport};
use crate::online::{run_online, OnlineError, OnlineReport, TraceRow};
use crate::repro::{self, ReproRow};
use crate::scenario::{Scenario, ScenarioError, ScenarioFile};
use crate::sim::Trajectory;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Online(#[from] OnlineError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub scenario: ScenarioFile,
    pub validation: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<OfflineReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<ForwardCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_error: Option<String>,
    /// Human-readable flags raised by the command; empty when every check passed.
    pub flags: Vec<String>,
}

impl Report {
    fn new(command: &str, sc: &Scenario) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: sc.seed,
            scenario: sc.file.clone(),
            validation: sc.diagnostics.clone(),
            offline: None,
            online: None,
            verify: None,
            verify_error: None,
            flags: sc.diagnostics.failures().map(|c| format!("validation: {} ({})", c.name, c.detail)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Result of one command: files written and whether every check passed.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub ok: bool,
    pub summary: String,
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn trajectory_csv(tr: &Trajectory) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["t".to_string()];
    header.extend((1..=tr.n()).map(|j| format!("x{j}")));
    header.extend((1..=tr.p()).map(|j| format!("u{j}")));
    header.push("segment".into());
    w.write_record(&header)?;
    for k in 0..tr.len() {
        let mut rec = vec![tr.t[k].to_string()];
        rec.extend(tr.x[k].iter().map(f64::to_string));
        rec.extend(tr.u[k].iter().map(f64::to_string));
        rec.push(tr.segment[k].to_string());
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?).expect("utf8 csv"))
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<String, CliError> {
    let nt = rows.iter().map(|r| r.theta_bar.len()).max().unwrap_or(0);
    let ne = rows.iter().map(|r| r.eta.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["t".to_string(), "player".to_string()];
    header.extend((1..=nt).map(|j| format!("theta_bar{j}")));
    header.extend((1..=ne).map(|j| format!("eta{j}")));
    header.extend(["stop_metric_fne", "stop_metric_hjb", "frozen_fne", "frozen_hjb"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.t.to_string(), (r.player + 1).to_string()];
        rec.extend((0..nt).map(|j| r.theta_bar.get(j).map(f64::to_string).unwrap_or_default()));
        rec.extend((0..ne).map(|j| r.eta.get(j).map(f64::to_string).unwrap_or_default()));
        rec.push(opt(r.metric_fne));
        rec.push(opt(r.metric_hjb));
        rec.push((r.frozen_fne as u8).to_string());
        rec.push((r.frozen_hjb as u8).to_string());
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?).expect("utf8 csv"))
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Out<'_> {
    fn put(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        self.files.push(p);
        Ok(())
    }
}

pub fn cmd_generate(sc: &Scenario, out_dir: &Path) -> Result<Outcome, CliError> {
    let mut out = Out { dir: out_dir, files: vec![] };
    let gt = generate_gt(sc)?;
    out.put("gt_trajectory.csv", &trajectory_csv(&gt)?)?;
    let report = Report::new("generate", sc);
    out.put("generate_report.json", &report.to_json())?;
    let summary = format!("{} steps in {} segments", gt.len(), gt.segments().len());
    Ok(Outcome { files: out.files, ok: report.flags.is_empty(), summary })
}

fn offline_flags(r: &OfflineReport, flags: &mut Vec<String>) {
    for (i, p) in r.players.iter().enumerate() {
        if !p.fne.full_rank {
            flags.push(format!("player {}: strategy regressor rank {} (full branch)", i + 1, p.fne.rank));
        }
        for v in &p.selection.violations {
            flags.push(format!("player {}: selected parameters rejected: {v}", i + 1));
        }
    }
    match (&r.forward, &r.forward_error) {
        (Some(f), _) if !f.converged => flags.push("forward policy iteration did not converge".into()),
        (_, Some(e)) => flags.push(format!("forward verification failed: {e}")),
        _ => {}
    }
}

pub fn cmd_offline(sc: &Scenario, out_dir: &Path) -> Result<Outcome, CliError> {
    let mut out = Out { dir: out_dir, files: vec![] };
    let run = run_offline(sc)?;
    out.put("gt_trajectory.csv", &trajectory_csv(&run.gt)?)?;
    if let Some(v) = &run.verified {
        out.put("verified_trajectory.csv", &trajectory_csv(v)?)?;
    }
    let mut report = Report::new("offline", sc);
    offline_flags(&run.report, &mut report.flags);
    let mut summary = String::new();
    for (i, p) in run.report.players.iter().enumerate() {
        let _ = writeln!(
            summary,
            "player {}: rank {} theta_bar {:?} w {:?} alpha {:?} beta {:?}",
            i + 1,
            p.fne.rank,
            p.fne.theta_bar,
            p.selection.w,
            p.selection.alpha,
            p.selection.beta
        );
    }
    if let Some(f) = &run.report.forward {
        let _ = writeln!(summary, "forward NSAE dx {:.6} du {:.6}", f.nsae_vs_gt.dx, f.nsae_vs_gt.du);
    }
    report.offline = Some(run.report);
    out.put("offline_report.json", &report.to_json())?;
    Ok(Outcome { files: out.files, ok: report.flags.is_empty(), summary })
}

pub fn cmd_online(sc: &Scenario, out_dir: &Path) -> Result<Outcome, CliError> {
    let mut out = Out { dir: out_dir, files: vec![] };
    let off = run_offline(sc)?;
    let run = run_online(sc, Some(&off))?;
    out.put("learning_trace.csv", &trace_csv(&run.trace)?)?;
    let mut report = Report::new("online", sc);
    let r = &run.report;
    if let Some(f) = &r.failure {
        report.flags.push(format!("learner failure: {f}"));
    }
    if r.horizon_exhausted {
        report.flags.push("horizon exhausted before every law froze".into());
    }
    let mut summary = String::new();
    for (i, p) in r.players.iter().enumerate() {
        if p.discrepancy {
            report.flags.push(format!(
                "player {}: online theta_bar {:?} differs from offline {:?}",
                i + 1,
                p.theta_bar,
                p.offline_theta_bar.clone().unwrap_or_default()
            ));
        }
        let _ = writeln!(
            summary,
            "player {}: theta_bar {:?} alpha {:?} beta {:?} freeze fne {:?} hjb {:?} membership {:?}",
            i + 1,
            p.theta_bar,
            p.alpha,
            p.beta,
            p.fne_freeze,
            p.hjb_freeze,
            p.membership_residual
        );
    }
    if let Some(e) = &r.forward_error {
        report.flags.push(format!("forward verification failed: {e}"));
    }
    report.offline = Some(off.report);
    report.online = Some(run.report);
    out.put("online_report.json", &report.to_json())?;
    Ok(Outcome { files: out.files, ok: report.flags.is_empty(), summary })
}

pub fn cmd_verify(sc: &Scenario, out_dir: &Path) -> Result<Outcome, CliError> {
    let mut out = Out { dir: out_dir, files: vec![] };
    let params: Vec<(Vec<f64>, Vec<f64>)> = match &sc.file.verify {
        Some(v) => v.iter().map(|p| (p.alpha.clone(), p.beta.clone())).collect(),
        None => sc.file.players.iter().map(|p| (p.alpha.clone(), p.beta.clone())).collect(),
    };
    let gt = generate_gt(sc)?;
    let init = sc.model.gt_strategies().map_err(OfflineError::from)?;
    let mut report = Report::new("verify", sc);
    let mut summary = String::new();
    match forward_verify(sc, &params, init, &gt, sc.offline.pi) {
        Ok((check, traj)) => {
            out.put("verified_trajectory.csv", &trajectory_csv(&traj)?)?;
            let _ = writeln!(summary, "NSAE dx {:.6} du {:.6}", check.nsae_vs_gt.dx, check.nsae_vs_gt.du);
            if !check.converged {
                report.flags.push("forward policy iteration did not converge".into());
            }
            report.verify = Some(check);
        }
        Err(e) => {
            report.flags.push(format!("forward verification failed: {e}"));
            report.verify_error = Some(e.to_string());
        }
    }
    out.put("verify_report.json", &report.to_json())?;
    Ok(Outcome { files: out.files, ok: report.flags.is_empty(), summary })
}

/// Run the bundled example experiments and write the comparison table.
/// `fixtures` overrides the bundled scenario directory.
pub fn cmd_repro_paper(fixtures: Option<&Path>, out_dir: &Path, overrides: &[String]) -> Result<Outcome, CliError> {
    let mut out = Out { dir: out_dir, files: vec![] };
    let set = repro::load_fixtures(fixtures, overrides)?;
    let res = repro::run(&set)?;
    out.put("repro_table.csv", &repro_csv(&res.rows)?)?;
    out.put("repro_table.json", &(serde_json::to_string_pretty(&res.rows).expect("rows serialize") + "\n"))?;
    for (name, r) in &res.reports {
        out.put(&format!("{name}_report.json"), &r.to_json())?;
    }
    out.put("online_learning_trace.csv", &trace_csv(&res.online_trace)?)?;
    let table = repro::render_table(&res.rows);
    let ok = res.rows.iter().all(|r| r.pass);
    Ok(Outcome { files: out.files, ok, summary: table })
}

fn repro_csv(rows: &[ReproRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["experiment", "quantity", "reported", "computed", "tolerance", "pass"])?;
    for r in rows {
        w.write_record([&r.experiment, &r.quantity, &r.reported, &r.computed, &r.tolerance, &r.pass.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?).expect("utf8 csv"))
}

/// Assemble a report for an already-finished run, used by the reproduction driver.
pub fn offline_report(sc: &Scenario, r: OfflineReport) -> Report {
    let mut rep = Report::new("offline", sc);
    offline_flags(&r, &mut rep.flags);
    rep.offline = Some(r);
    rep
}

pub fn online_report(sc: &Scenario, off: OfflineReport, on: OnlineReport) -> Report {
    let mut rep = Report::new("online", sc);
    rep.offline = Some(off);
    rep.online = Some(on);
    rep
}
