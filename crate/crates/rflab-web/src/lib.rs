//! Browser front end: draw projected paths, watch the clock concentrate as
//! N grows, and tabulate the scalar generator defect.
//!
//! Each exported function is a thin wrapper over a plain Rust function of the
//! same name with a `_json` suffix, so the logic runs in native tests too.

use rflab::backgrounds::FlowConfig;
use rflab::config::RunConfig;
use rflab::lab::scalar_defect_check;
use rflab::reference::parabolic_base_paths;
use rflab::rng::RngSpec;
use rflab::sde::{simulate_base_observe, simulate_base_paths, PerelmanModel, SimSpec};
use rflab::{LabError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_PATHS: u32 = 20_000;
const MAX_DRAWN: u32 = 200;

fn background(name: &str) -> Result<rflab::config::Background> {
    let d = RunConfig::default();
    match name {
        "sphere" => Ok(d.sphere),
        "torus" => Ok(d.torus),
        other => Err(LabError::Config(format!("unknown background `{other}`"))),
    }
}

fn check_size(n_paths: u32, cap: u32) -> Result<usize> {
    if n_paths == 0 || n_paths > cap {
        return Err(LabError::Config(format!("path count must be in 1..={cap}")));
    }
    Ok(n_paths as usize)
}

#[derive(Serialize)]
struct Paths {
    /// coordinates per state: x (2 on the torus, 3 ambient on the sphere) then τ
    stride: usize,
    n_saved: usize,
    perelman: Vec<f64>,
    parabolic: Vec<f64>,
}

/// Perelman paths at `big_n` and parabolic paths on the same noise, saved
/// at 100 times up to `s`.
pub fn sample_paths_json(bg: &str, big_n: u32, n_paths: u32, s: f64, seed: u32) -> Result<String> {
    let bg = background(bg)?;
    let n_paths = check_size(n_paths, MAX_DRAWN)?;
    let step = 1e-3;
    let steps = (s / step).round().max(1.0) as usize;
    let spec = SimSpec::new(s, step, n_paths).saving_every((steps / 100).max(1));
    let rng = RngSpec::new(seed as u64);
    let pe = simulate_base_paths(&PerelmanModel::new(&bg.flow, big_n.max(1) as u64), &bg.start, &spec, &rng)?;
    let pa = parabolic_base_paths(&bg.flow, &bg.start, &spec, &rng)?;
    let flatten = |ens: &rflab::sde::PathEnsemble| {
        let mut out = vec![];
        for i in 0..ens.n_paths {
            let p = ens.path(i);
            for k in 0..p.n_saved {
                let st = p.state(k);
                out.extend_from_slice(st.coords);
                out.push(st.tau);
            }
        }
        out
    };
    let paths = Paths { stride: bg.flow.stepping_dim() + 1, n_saved: spec.n_saved(), perelman: flatten(&pe), parabolic: flatten(&pa) };
    serde_json::to_string(&paths).map_err(|e| LabError::Contract(e.to_string()))
}

#[derive(Serialize)]
struct Clock {
    big_n: u64,
    /// deterministic limit τ0 + s
    limit: f64,
    samples: Vec<f64>,
}

/// Samples of τ_s for each N in `n_list`, all driven by the same noise.
pub fn clock_samples_json(bg: &str, n_list: &[u32], n_paths: u32, s: f64, seed: u32) -> Result<String> {
    let bg = background(bg)?;
    let n_paths = check_size(n_paths, MAX_PATHS)?;
    bg.flow.check_tau(bg.start.tau + s)?;
    let spec = SimSpec::new(s, 1e-3, n_paths).final_only();
    let rng = RngSpec::new(seed as u64);
    let out = n_list
        .iter()
        .map(|&n| {
            let rows = simulate_base_observe(&PerelmanModel::new(&bg.flow, n.max(1) as u64), &bg.start, &spec, &rng, |p| {
                vec![p.last().tau]
            })?;
            Ok(Clock { big_n: n as u64, limit: bg.start.tau + s, samples: rows.into_iter().map(|r| r[0]).collect() })
        })
        .collect::<Result<Vec<_>>>()?;
    serde_json::to_string(&out).map_err(|e| LabError::Contract(e.to_string()))
}

#[derive(Serialize)]
struct DefectRow {
    big_n: u64,
    max_defect: f64,
}

/// Largest |L^N f − (∂_τ + Δ) f| over the scalar battery, per N.
pub fn scalar_defect_json(n_list: &[u32]) -> Result<String> {
    let flows = [FlowConfig::sphere_default(), FlowConfig::torus_default()];
    let grid: Vec<u64> = n_list.iter().map(|&n| n.max(1) as u64).collect();
    let rep = scalar_defect_check(&flows, &grid, 20)?;
    let rows: Vec<DefectRow> = rep
        .rows
        .iter()
        .filter(|r| r.observable == "max_scalar_defect")
        .filter_map(|r| r.big_n.map(|n| DefectRow { big_n: n, max_defect: r.estimate }))
        .collect();
    serde_json::to_string(&rows).map_err(|e| LabError::Contract(e.to_string()))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn sample_paths(bg: &str, big_n: u32, n_paths: u32, s: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(sample_paths_json(bg, big_n, n_paths, s, seed))
}

#[wasm_bindgen]
pub fn clock_samples(bg: &str, n_list: Vec<u32>, n_paths: u32, s: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(clock_samples_json(bg, &n_list, n_paths, s, seed))
}

#[wasm_bindgen]
pub fn scalar_defect(n_list: Vec<u32>) -> std::result::Result<String, JsError> {
    js(scalar_defect_json(&n_list))
}
