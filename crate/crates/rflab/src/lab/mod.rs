//! N-indexed experiments and their reports.
//!
//! Every experiment returns an [`ExperimentReport`] whose checks carry the
//! thresholds they were judged against, so a report is self-describing.

mod checks;
mod cylinder;
mod frames;
mod marginal;

pub use checks::{
    christoffel_check, operator_check, ricci_scaling_check, ricci_validate, scalar_defect_check,
    OperatorCheckParams,
};
pub use cylinder::{
    cylinder_battery, cylinder_convergence_experiment, gradient_battery, gradient_estimate_experiment, BaseFactor,
    CylinderCase, CylinderParams, GradientCase, GradientParams, GradientSides,
};
pub use frames::{e00_oracle, frame_concentration_experiment, FrameParams};
pub use marginal::{
    martingale_battery, martingale_residual_experiment, stepping_coords, time_marginal_experiment, Compensator,
    MarginalParams, MartingaleCases, MartingaleParams, ProductFunction, SpaceFactor, TimeFactor, WindowEvent,
};

use crate::backgrounds::FlowConfig;
use crate::error::{LabError, Result};
use serde::Serialize;

/// Monte Carlo sizing shared by the stochastic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McParams {
    pub n_paths: usize,
    pub step: f64,
    pub seed: u64,
}

/// One line of results.csv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub scenario: String,
    pub background: String,
    pub big_n: Option<u64>,
    pub s: Option<f64>,
    pub n_paths: usize,
    pub step: Option<f64>,
    pub observable: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub oracle: Option<f64>,
    pub abs_err: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub observable: String,
    pub slope: f64,
    pub stderr: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub background: String,
    pub n_grid: Vec<u64>,
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
    pub slopes: Vec<SlopeFit>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(scenario: &str, cfg: &FlowConfig) -> Self {
        Self::named(scenario, cfg.background.label())
    }

    pub fn named(scenario: &str, background: &str) -> Self {
        Self {
            scenario: scenario.into(),
            background: background.into(),
            n_grid: vec![],
            rows: vec![],
            checks: vec![],
            slopes: vec![],
            notes: vec![],
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub(crate) fn push_check(&mut self, name: &str, pass: bool, value: f64, threshold: &str, detail: String) {
        self.checks.push(Check { name: name.into(), pass, value, threshold: threshold.into(), detail });
    }

    pub(crate) fn row(&self, observable: &str) -> RowBuilder {
        RowBuilder(ResultRow {
            scenario: self.scenario.clone(),
            background: self.background.clone(),
            big_n: None,
            s: None,
            n_paths: 0,
            step: None,
            observable: observable.into(),
            estimate: f64::NAN,
            stderr: None,
            oracle: None,
            abs_err: None,
            pass: None,
        })
    }

    /// Merge another report's rows, checks, slopes and notes.
    pub fn absorb(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.checks.extend(other.checks);
        self.slopes.extend(other.slopes);
        self.notes.extend(other.notes);
        for n in other.n_grid {
            if !self.n_grid.contains(&n) {
                self.n_grid.push(n);
            }
        }
    }
}

pub(crate) struct RowBuilder(ResultRow);

impl RowBuilder {
    pub fn n(mut self, n: u64) -> Self {
        self.0.big_n = Some(n);
        self
    }
    pub fn s(mut self, s: f64) -> Self {
        self.0.s = Some(s);
        self
    }
    pub fn mc(mut self, n_paths: usize, step: f64) -> Self {
        self.0.n_paths = n_paths;
        self.0.step = Some(step);
        self
    }
    pub fn est(mut self, estimate: f64, stderr: Option<f64>) -> Self {
        self.0.estimate = estimate;
        self.0.stderr = stderr;
        self
    }
    pub fn oracle(mut self, oracle: f64) -> Self {
        self.0.oracle = Some(oracle);
        self.0.abs_err = Some((self.0.estimate - oracle).abs());
        self
    }
    pub fn pass(mut self, pass: bool) -> Self {
        self.0.pass = Some(pass);
        self
    }
    pub fn push(self, report: &mut ExperimentReport) {
        report.rows.push(self.0);
    }
}

/// Least-squares slope of ln y against ln x, with its regression stderr.
pub fn loglog_slope(observable: &str, xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(LabError::Contract("slope fits need at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(LabError::Contract(format!("non-positive value in log-log fit of {observable}")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let stderr = if lx.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(SlopeFit { observable: observable.into(), slope, stderr, xs: xs.to_vec(), ys: ys.to_vec() })
}

/// √(a² + b²), the stderr of a difference of independent estimates.
pub fn combined_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}
