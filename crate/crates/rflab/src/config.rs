//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! [run]
//! scenario = all
//! background = both        # sphere | torus | both
//! seed = 1
//! paths = default          # or a path count overriding every experiment
//! step = default
//! N_list = default         # or e.g. 100,1000,10000
//! out = rflab-out
//! workers = 0              # 0 lets rayon decide
//! dump_ensemble = false
//!
//! [sphere]
//! n = 2
//! T = 0.4
//! delta = 0.02
//! c0 = 1
//! x0 = 0.3,-0.2            # north stereographic chart
//! tau0 = 0.04
//!
//! [torus]
//! n = 2
//! T = 1
//! delta = 0.05
//! side = 6.283185307179586
//! x0 = 0.7,0.4
//! tau0 = 0.1
//! ```
//!
//! Unknown sections and keys are errors. Every key is optional.

use crate::backgrounds::{BackgroundKind, ChartId, ChartPoint, FlatTorus, FlowConfig, ShrinkingSphere};
use crate::error::{LabError, Result};
use crate::sde::fmt_num;
use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    RicciValidate,
    CurvatureCheck,
    OperatorCheck,
    ScalarConvergence,
    FrameConvergence,
    CylinderConvergence,
    GradientEstimate,
    All,
}

impl Scenario {
    /// Concrete scenarios in the order `all` runs them.
    pub const SEQUENCE: [Scenario; 7] = [
        Scenario::RicciValidate,
        Scenario::CurvatureCheck,
        Scenario::OperatorCheck,
        Scenario::ScalarConvergence,
        Scenario::FrameConvergence,
        Scenario::CylinderConvergence,
        Scenario::GradientEstimate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::RicciValidate => "ricci-validate",
            Scenario::CurvatureCheck => "curvature-check",
            Scenario::OperatorCheck => "operator-check",
            Scenario::ScalarConvergence => "scalar-convergence",
            Scenario::FrameConvergence => "frame-convergence",
            Scenario::CylinderConvergence => "cylinder-convergence",
            Scenario::GradientEstimate => "gradient-estimate",
            Scenario::All => "all",
        }
    }

    pub fn expand(self) -> Vec<Scenario> {
        match self {
            Scenario::All => Self::SEQUENCE.to_vec(),
            s => vec![s],
        }
    }
}

impl FromStr for Scenario {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Self::SEQUENCE
            .iter()
            .copied()
            .chain([Scenario::All])
            .find(|c| c.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown scenario `{s}`")))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundSelection {
    Sphere,
    Torus,
    Both,
}

impl BackgroundSelection {
    fn name(self) -> &'static str {
        match self {
            BackgroundSelection::Sphere => "sphere",
            BackgroundSelection::Torus => "torus",
            BackgroundSelection::Both => "both",
        }
    }
}

/// A background together with the start point its stochastic experiments use.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub flow: FlowConfig,
    pub start: ChartPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub selection: BackgroundSelection,
    pub sphere: Background,
    pub torus: Background,
    pub seed: u64,
    /// `None` keeps each experiment's own default.
    pub n_paths: Option<usize>,
    pub step: Option<f64>,
    pub n_list: Option<Vec<u64>>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub dump_ensemble: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::All,
            selection: BackgroundSelection::Both,
            sphere: Background {
                flow: FlowConfig::sphere_default(),
                start: ChartPoint::new(vec![0.3, -0.2], 0.04, ChartId::North),
            },
            torus: Background {
                flow: FlowConfig::torus_default(),
                start: ChartPoint::new(vec![0.7, 0.4], 0.1, ChartId::Periodic),
            },
            seed: 1,
            n_paths: None,
            step: None,
            n_list: None,
            out_dir: PathBuf::from("rflab-out"),
            workers: 0,
            dump_ensemble: false,
        }
    }
}

impl RunConfig {
    /// Selected backgrounds, sphere first.
    pub fn backgrounds(&self) -> Vec<&Background> {
        match self.selection {
            BackgroundSelection::Sphere => vec![&self.sphere],
            BackgroundSelection::Torus => vec![&self.torus],
            BackgroundSelection::Both => vec![&self.sphere, &self.torus],
        }
    }

    /// Range and positivity checks on the overridable fields.
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == Some(0) {
            return Err(LabError::Config("paths must be positive".into()));
        }
        if let Some(h) = self.step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(LabError::Config("step must be positive".into()));
            }
        }
        if let Some(l) = &self.n_list {
            if l.is_empty() || l.contains(&0) {
                return Err(LabError::Config("N_list needs positive entries".into()));
            }
        }
        for bg in [&self.sphere, &self.torus] {
            bg.flow.validate()?;
            bg.flow.check_tau(bg.start.tau)?;
            if bg.start.coords.len() != bg.flow.n {
                return Err(LabError::Config(format!("x0 needs {} coordinates", bg.flow.n)));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back this config.
    pub fn resolved_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "default".into());
        let list = |v: &[f64]| v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        out.push_str("[run]\n");
        out.push_str(&format!("scenario = {}\n", self.scenario));
        out.push_str(&format!("background = {}\n", self.selection.name()));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("paths = {}\n", opt(self.n_paths.map(|v| v.to_string()))));
        out.push_str(&format!("step = {}\n", opt(self.step.map(fmt_num))));
        out.push_str(&format!(
            "N_list = {}\n",
            opt(self.n_list.as_ref().map(|l| l.iter().map(u64::to_string).collect::<Vec<_>>().join(",")))
        ));
        out.push_str(&format!("out = {}\n", self.out_dir.display()));
        out.push_str(&format!("workers = {}\n", self.workers));
        out.push_str(&format!("dump_ensemble = {}\n", self.dump_ensemble));
        for (name, bg) in [("sphere", &self.sphere), ("torus", &self.torus)] {
            out.push_str(&format!("\n[{name}]\n"));
            out.push_str(&format!("n = {}\n", bg.flow.n));
            out.push_str(&format!("T = {}\n", fmt_num(bg.flow.t_final)));
            out.push_str(&format!("delta = {}\n", fmt_num(bg.flow.delta)));
            match bg.flow.background {
                BackgroundKind::ShrinkingSphere(s) => out.push_str(&format!("c0 = {}\n", fmt_num(s.c0))),
                BackgroundKind::FlatTorus(t) => out.push_str(&format!("side = {}\n", fmt_num(t.side))),
            }
            out.push_str(&format!("x0 = {}\n", list(&bg.start.coords)));
            out.push_str(&format!("tau0 = {}\n", fmt_num(bg.start.tau)));
        }
        out
    }
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

fn perr(line: usize, key: &str, msg: impl Into<String>) -> LabError {
    LabError::Parse { line, key: key.into(), msg: msg.into() }
}

fn num<T: FromStr>(key: &str, e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| perr(e.line, key, format!("cannot read `{}` as {}", e.value, std::any::type_name::<T>())))
}

fn list<T: FromStr>(key: &str, e: &Entry) -> Result<Vec<T>> {
    e.value.split(',').map(|v| v.trim()).map(|v| {
        v.parse().map_err(|_| perr(e.line, key, format!("cannot read list entry `{v}` as {}", std::any::type_name::<T>())))
    }).collect()
}

/// `default` or a value.
fn optional<T>(e: &Entry, read: impl FnOnce() -> Result<T>) -> Result<Option<T>> {
    if e.value == "default" {
        Ok(None)
    } else {
        read().map(Some)
    }
}

const RUN_KEYS: [&str; 9] = ["scenario", "background", "seed", "paths", "step", "N_list", "out", "workers", "dump_ensemble"];
const SPHERE_KEYS: [&str; 6] = ["n", "T", "delta", "c0", "x0", "tau0"];
const TORUS_KEYS: [&str; 6] = ["n", "T", "delta", "side", "x0", "tau0"];

/// Parse a config file. Defaults fill every key the text leaves out.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut sections: HashMap<&str, HashMap<&str, Entry>> = HashMap::new();
    let mut current: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split(['#', ';']).next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| perr(line, body, "unterminated section header"))?.trim();
            if !matches!(name, "run" | "sphere" | "torus") {
                return Err(perr(line, name, "unknown section"));
            }
            current = Some(name);
            sections.entry(name).or_default();
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| perr(line, body, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let section = current.ok_or_else(|| perr(line, key, "key outside a section"))?;
        let allowed: &[&str] = match section {
            "run" => &RUN_KEYS,
            "sphere" => &SPHERE_KEYS,
            _ => &TORUS_KEYS,
        };
        if !allowed.contains(&key) {
            return Err(perr(line, key, format!("unknown key in [{section}]")));
        }
        if value.is_empty() {
            return Err(perr(line, key, "empty value"));
        }
        let map = sections.get_mut(section).expect("section registered");
        if map.insert(key, Entry { line, value }).is_some() {
            return Err(perr(line, key, "duplicate key"));
        }
    }

    let mut cfg = RunConfig::default();
    if let Some(run) = sections.get("run") {
        for (&key, e) in run {
            match key {
                "scenario" => cfg.scenario = e.value.parse().map_err(|err: LabError| perr(e.line, key, err.to_string()))?,
                "background" => {
                    cfg.selection = match e.value {
                        "sphere" => BackgroundSelection::Sphere,
                        "torus" => BackgroundSelection::Torus,
                        "both" => BackgroundSelection::Both,
                        v => return Err(perr(e.line, key, format!("expected sphere, torus or both, got `{v}`"))),
                    }
                }
                "seed" => cfg.seed = num(key, e)?,
                "paths" => cfg.n_paths = optional(e, || num(key, e))?,
                "step" => cfg.step = optional(e, || num(key, e))?,
                "N_list" => cfg.n_list = optional(e, || list(key, e))?,
                "out" => cfg.out_dir = PathBuf::from(e.value),
                "workers" => cfg.workers = num(key, e)?,
                "dump_ensemble" => cfg.dump_ensemble = num(key, e)?,
                _ => unreachable!("key list checked above"),
            }
        }
        let bad = |k: &str, msg: &str| run.get(k).map(|e| perr(e.line, k, msg));
        if cfg.n_paths == Some(0) {
            return Err(bad("paths", "must be positive").unwrap());
        }
        if cfg.step.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(bad("step", "must be positive").unwrap());
        }
        if cfg.n_list.as_ref().is_some_and(|l| l.contains(&0)) {
            return Err(bad("N_list", "entries must be positive").unwrap());
        }
    }
    if let Some(s) = sections.get("sphere") {
        let c0 = match cfg.sphere.flow.background {
            BackgroundKind::ShrinkingSphere(sp) => sp.c0,
            _ => unreachable!(),
        };
        let c0 = s.get("c0").map(|e| num("c0", e)).transpose()?.unwrap_or(c0);
        cfg.sphere = read_background(s, &cfg.sphere, BackgroundKind::ShrinkingSphere(ShrinkingSphere { c0 }))?;
    }
    if let Some(s) = sections.get("torus") {
        let side = match cfg.torus.flow.background {
            BackgroundKind::FlatTorus(t) => t.side,
            _ => unreachable!(),
        };
        let side = s.get("side").map(|e| num("side", e)).transpose()?.unwrap_or(side);
        cfg.torus = read_background(s, &cfg.torus, BackgroundKind::FlatTorus(FlatTorus { side }))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_background(s: &HashMap<&str, Entry>, base: &Background, kind: BackgroundKind) -> Result<Background> {
    let n: usize = s.get("n").map(|e| num("n", e)).transpose()?.unwrap_or(base.flow.n);
    let t_final: f64 = s.get("T").map(|e| num("T", e)).transpose()?.unwrap_or(base.flow.t_final);
    let delta: f64 = s.get("delta").map(|e| num("delta", e)).transpose()?.unwrap_or(base.flow.delta);
    // constraint errors point at the line most likely to be at fault
    let blame = ["delta", "T", "c0", "side", "n"].into_iter().find_map(|k| s.get(k).map(|e| (k, e.line)));
    let flow = FlowConfig::new(n, t_final, delta, kind).map_err(|err| match blame {
        Some((k, line)) => perr(line, k, err.to_string()),
        None => err,
    })?;
    let coords = match s.get("x0") {
        Some(e) => {
            let v: Vec<f64> = list("x0", e)?;
            if v.len() != n {
                return Err(perr(e.line, "x0", format!("expected {n} coordinates, got {}", v.len())));
            }
            v
        }
        None if base.start.coords.len() == n => base.start.coords.clone(),
        None => vec![0.0; n],
    };
    let tau: f64 = s.get("tau0").map(|e| num("tau0", e)).transpose()?.unwrap_or(base.start.tau);
    if !flow.tau_in_range(tau) {
        let line = s.get("tau0").map(|e| e.line).or(blame.map(|b| b.1)).unwrap_or(0);
        return Err(perr(line, "tau0", format!("tau0 = {tau} outside [{}, {}]", flow.delta, flow.t_final)));
    }
    Ok(Background { flow, start: ChartPoint::new(coords, tau, base.start.chart) })
}
