//! results.csv, summary.json and resolved.config.

use crate::error::{LabError, Result};
use crate::lab::{Check, ExperimentReport, ResultRow, SlopeFit};
use crate::sde::fmt_num;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RESOLVED_CONFIG: &str = "resolved.config";

pub const CSV_HEADER: [&str; 12] =
    ["scenario", "background", "N", "s", "n_paths", "step", "observable", "estimate", "stderr", "oracle", "abs_err", "pass"];

/// Everything one scenario produced, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub runtime_s: f64,
    pub reports: Vec<ExperimentReport>,
    pub error: Option<String>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.reports.iter().all(ExperimentReport::passed)
    }
}

#[derive(Serialize)]
struct ExperimentSummary<'a> {
    scenario: &'a str,
    background: &'a str,
    passed: bool,
    n_grid: &'a [u64],
    checks: &'a [Check],
    slopes: &'a [SlopeFit],
    notes: &'a [String],
}

#[derive(Serialize)]
struct ScenarioSummary<'a> {
    scenario: &'a str,
    passed: bool,
    runtime_s: f64,
    error: Option<&'a str>,
    experiments: Vec<ExperimentSummary<'a>>,
}

#[derive(Serialize)]
struct Summary<'a> {
    passed: bool,
    scenarios: Vec<ScenarioSummary<'a>>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> LabError {
    LabError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Write through a sibling temp file and rename over the target.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn csv_record(r: &ResultRow) -> [String; 12] {
    [
        r.scenario.clone(),
        r.background.clone(),
        r.big_n.map(|n| n.to_string()).unwrap_or_default(),
        opt_num(r.s),
        r.n_paths.to_string(),
        opt_num(r.step),
        r.observable.clone(),
        fmt_num(r.estimate),
        opt_num(r.stderr),
        opt_num(r.oracle),
        opt_num(r.abs_err),
        r.pass.map(|p| p.to_string()).unwrap_or_default(),
    ]
}

/// results.csv contents; rows in report order, so grouped by scenario.
pub fn results_csv<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    let ser = |e: csv::Error| LabError::Io { path: RESULTS_CSV.into(), msg: e.to_string() };
    w.write_record(CSV_HEADER).map_err(ser)?;
    for rep in reports {
        for row in &rep.rows {
            w.write_record(csv_record(row)).map_err(ser)?;
        }
    }
    w.into_inner().map_err(|e| LabError::Io { path: RESULTS_CSV.into(), msg: e.to_string() })
}

pub fn summary_json(outcomes: &[ScenarioOutcome]) -> Result<Vec<u8>> {
    let summary = Summary {
        passed: outcomes.iter().all(ScenarioOutcome::passed),
        scenarios: outcomes
            .iter()
            .map(|o| ScenarioSummary {
                scenario: &o.scenario,
                passed: o.passed(),
                runtime_s: o.runtime_s,
                error: o.error.as_deref(),
                experiments: o
                    .reports
                    .iter()
                    .map(|r| ExperimentSummary {
                        scenario: &r.scenario,
                        background: &r.background,
                        passed: r.passed(),
                        n_grid: &r.n_grid,
                        checks: &r.checks,
                        slopes: &r.slopes,
                        notes: &r.notes,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&summary).map_err(|e| io_err(Path::new(SUMMARY_JSON), e))?;
    out.push(b'\n');
    Ok(out)
}

/// Write the three artifacts into `dir`, creating it if needed.
pub fn write_outputs(outcomes: &[ScenarioOutcome], resolved_config: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = [
        (RESULTS_CSV, results_csv(outcomes.iter().flat_map(|o| &o.reports))?),
        (SUMMARY_JSON, summary_json(outcomes)?),
        (RESOLVED_CONFIG, resolved_config.as_bytes().to_vec()),
    ];
    let mut written = vec![];
    for (name, bytes) in files {
        let path = dir.join(name);
        atomic_write(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
