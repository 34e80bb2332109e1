use std::collections::BTreeMap;
use std::path::Path;

use crate::adversarial::MetricsRecord;
use crate::metrics::median;

use super::{read_metrics, ExperimentConfig, HarnessError};

/// Eval W2 a run must reach to count as converged.
pub const W2_THRESHOLD: f64 = 0.1;
/// Steps whose gradient norms form the early-training median.
pub const EARLY_STEPS: usize = 50;
const NEVER: &str = "∞";

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub init_mode: String,
    pub seed: u64,
    /// First logged step with eval W2 at or below the threshold.
    pub steps_to_threshold: Option<usize>,
    pub median_early_grad_norm: Option<f64>,
    pub final_mode_gap: f64,
    pub final_w2: f64,
}

pub fn summarize(run: &str, init_mode: &str, seed: u64, records: &[MetricsRecord]) -> Option<RunSummary> {
    let last = records.last()?;
    let early: Vec<f64> = records.iter().filter(|r| (1..=EARLY_STEPS).contains(&r.step)).filter_map(|r| r.grad_norm_g).collect();
    Some(RunSummary {
        run: run.to_string(),
        init_mode: init_mode.to_string(),
        seed,
        steps_to_threshold: records.iter().find(|r| r.w2_eval <= W2_THRESHOLD).map(|r| r.step),
        median_early_grad_norm: median(&early),
        final_mode_gap: last.mode_mass_gap,
        final_w2: last.w2_eval,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<RunSummary>,
    pub csv: String,
    /// Runs skipped because their logs were missing, unreadable or incomplete.
    pub problems: Vec<String>,
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => NEVER.to_string(),
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

fn load_run(dir: &Path) -> Result<(ExperimentConfig, Vec<MetricsRecord>), String> {
    let text = std::fs::read_to_string(dir.join("config.json")).map_err(|e| format!("config.json: {e}"))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    let records = read_metrics(&dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    match records.last() {
        None => Err("metrics.jsonl is empty".into()),
        Some(r) if r.step < cfg.train.steps => Err(format!("partial log: last step {} of {}", r.step, cfg.train.steps)),
        Some(_) => Ok((cfg, records)),
    }
}

/// Summarizes every run directory under `runs`, then appends one median row per init mode.
pub fn report(runs: &Path) -> Result<Report, HarnessError> {
    let mut dirs: Vec<_> = std::fs::read_dir(runs)
        .map_err(HarnessError::io(runs))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for dir in &dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        match load_run(dir) {
            Ok((cfg, records)) => rows.extend(summarize(&name, cfg.train.init_mode.as_str(), cfg.train.seed, &records)),
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Input(format!("no completed runs under {}; {}", runs.display(), problems.join("; "))));
    }
    rows.sort_by(|a, b| (&a.init_mode, a.seed, &a.run).cmp(&(&b.init_mode, b.seed, &b.run)));
    Ok(Report { csv: to_csv(&rows), rows, problems })
}

fn to_csv(rows: &[RunSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["run", "init_mode", "seed", "steps_to_w2_le_0.1", "median_early_grad_norm", "final_mode_gap", "final_w2"];
    w.write_record(header).expect("in-memory write");
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in rows {
        let steps = r.steps_to_threshold.map_or(NEVER.to_string(), |s| s.to_string());
        let rec = [r.run.clone(), r.init_mode.clone(), r.seed.to_string(), steps, num(r.median_early_grad_norm), num(Some(r.final_mode_gap)), num(Some(r.final_w2))];
        w.write_record(&rec).expect("in-memory write");
        groups.entry(&r.init_mode).or_default().push(r);
    }
    for (mode, g) in groups {
        let steps: Vec<f64> = g.iter().map(|r| r.steps_to_threshold.map_or(f64::INFINITY, |s| s as f64)).collect();
        let grads: Vec<f64> = g.iter().filter_map(|r| r.median_early_grad_norm).collect();
        let gaps: Vec<f64> = g.iter().map(|r| r.final_mode_gap).collect();
        let w2: Vec<f64> = g.iter().map(|r| r.final_w2).collect();
        let rec = ["median".to_string(), mode.to_string(), String::new(), num(median(&steps)), num(median(&grads)), num(median(&gaps)), num(median(&w2))];
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
