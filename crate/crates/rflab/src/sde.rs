//! Seeded Monte Carlo integration of the projected diffusions.
//!
//! Base points move by Euler–Maruyama, z ← z + b h + σ √h ξ with σσᵀ = 2a.
//! Frames ride along the realised base increments with a Heun step
//!
//! ```text
//! ẽ     = e − Γ(z_k)[Δz] e
//! e_new = e − ½ (Γ(z_k)[Δz] e + Γ(z_{k+1})[Δz] ẽ)
//! ```
//!
//! which is consistent with the Stratonovich transport equation. Paths are
//! absorbed when τ leaves [δ, T]; the last state is clamped to the boundary
//! and frozen.

use crate::backgrounds::{
    ambient_to_stereo, chart_map, inversion_jacobian, BackgroundKind, ChartId, ChartPoint, FlowConfig,
};
use crate::error::{LabError, Result};
use crate::generators::{determinant, FrameState};
use crate::rng::RngSpec;
use rayon::prelude::*;
use std::io::Write;

/// Drift and noise factor in the stepping representation `[τ, coords]`.
#[derive(Debug, Clone)]
pub struct StepCoeffs {
    pub dim: usize,
    pub b: Vec<f64>,
    /// Row-major dim×dim with σσᵀ = 2a.
    pub sigma: Vec<f64>,
}

impl StepCoeffs {
    pub fn new(dim: usize) -> Self {
        Self { dim, b: vec![0.0; dim], sigma: vec![0.0; dim * dim] }
    }
}

/// A diffusion on the space-time of a background, with an optional frame
/// transported by a connection over `[τ, x]`.
pub trait DiffusionModel: Sync {
    fn cfg(&self) -> &FlowConfig;
    fn label(&self) -> String;
    /// τ moves as τ0 + s with no noise.
    fn deterministic_clock(&self) -> bool;
    fn step_coeffs(&self, tau: f64, coords: &[f64], out: &mut StepCoeffs) -> Result<()>;
    /// Frame size m; frames have m − n non-spatial leading rows.
    fn frame_size(&self) -> usize;
    /// Connection matrices `[i][k][j]` for i over `[τ, x]`, at a chart point.
    fn transport_matrices(&self, tau: f64, x: &[f64], chart: ChartId, out: &mut [f64]) -> Result<()>;
}

fn sphere_scale(cfg: &FlowConfig, tau: f64) -> Result<f64> {
    let s = cfg.sphere().ok_or_else(|| LabError::Contract("not a sphere".into()))?;
    let c = s.scale(cfg.n, cfg.calt(), tau);
    if !(c > 0.0) {
        return Err(LabError::Domain(format!("sphere collapsed at tau = {tau}")));
    }
    Ok(c)
}

/// Spatial part of the heat generator in the stepping representation:
/// flat on the torus, (1/c) times the tangential projector on the sphere
/// (the normal Itô drift is supplied by the retraction).
fn spatial_step_coeffs(cfg: &FlowConfig, tau: f64, coords: &[f64], out: &mut StepCoeffs) -> Result<()> {
    let dim = out.dim;
    match cfg.background {
        BackgroundKind::FlatTorus(_) => {
            for i in 1..dim {
                out.b[i] = 0.0;
                for j in 1..dim {
                    out.sigma[i * dim + j] = if i == j { std::f64::consts::SQRT_2 } else { 0.0 };
                }
            }
        }
        BackgroundKind::ShrinkingSphere(_) => {
            let c = sphere_scale(cfg, tau)?;
            let f = (2.0 / c).sqrt();
            for i in 1..dim {
                out.b[i] = 0.0;
                for j in 1..dim {
                    let p = if i == j { 1.0 } else { 0.0 } - coords[i - 1] * coords[j - 1];
                    out.sigma[i * dim + j] = f * p;
                }
            }
        }
    }
    Ok(())
}

fn scalar_curvature_and_rate(cfg: &FlowConfig, tau: f64) -> Result<(f64, f64)> {
    match cfg.background {
        BackgroundKind::FlatTorus(_) => Ok((0.0, 0.0)),
        BackgroundKind::ShrinkingSphere(s) => {
            let c = sphere_scale(cfg, tau)?;
            let nf = cfg.n as f64;
            let r = nf * (nf - 1.0) / c;
            Ok((r, -r * s.scale_rate(cfg.n) / c))
        }
    }
}

/// Connection data of g_τ at a chart point, in closed form for the two
/// families (flat, or conformally flat with x-independent curvature).
#[derive(Debug, Clone)]
pub struct LocalConnection {
    /// Γ^k_ij at `(k*n + i)*n + j`.
    pub gamma: Vec<f64>,
    pub ric_mixed: Vec<f64>,
    pub ric_lower: Vec<f64>,
    pub scal: f64,
    pub scal_tau: f64,
}

pub fn local_connection(cfg: &FlowConfig, tau: f64, x: &[f64]) -> Result<LocalConnection> {
    let n = cfg.n;
    let (scal, scal_tau) = scalar_curvature_and_rate(cfg, tau)?;
    let mut lc = LocalConnection {
        gamma: vec![0.0; n * n * n],
        ric_mixed: vec![0.0; n * n],
        ric_lower: vec![0.0; n * n],
        scal,
        scal_tau,
    };
    if let BackgroundKind::ShrinkingSphere(_) = cfg.background {
        let c = sphere_scale(cfg, tau)?;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let lam = 4.0 / ((1.0 + r2) * (1.0 + r2));
        let dphi: Vec<f64> = x.iter().map(|v| -2.0 * v / (1.0 + r2)).collect();
        for k in 0..n {
            lc.ric_mixed[k * n + k] = (n as f64 - 1.0) / c;
            lc.ric_lower[k * n + k] = (n as f64 - 1.0) * lam;
            for i in 0..n {
                for j in 0..n {
                    let mut v = 0.0;
                    if k == i {
                        v += dphi[j];
                    }
                    if k == j {
                        v += dphi[i];
                    }
                    if i == j {
                        v -= dphi[k];
                    }
                    lc.gamma[(k * n + i) * n + j] = v;
                }
            }
        }
    }
    Ok(lc)
}

/// Projected Brownian motion of Perelman's manifold of sphere dimension N,
/// with the (n+1)-block frame.
#[derive(Debug, Clone)]
pub struct PerelmanModel {
    pub cfg: FlowConfig,
    pub big_n: u64,
}

impl PerelmanModel {
    pub fn new(cfg: &FlowConfig, big_n: u64) -> Self {
        Self { cfg: cfg.clone(), big_n }
    }
}

impl DiffusionModel for PerelmanModel {
    fn cfg(&self) -> &FlowConfig {
        &self.cfg
    }

    fn label(&self) -> String {
        format!("perelman(N={})", self.big_n)
    }

    fn deterministic_clock(&self) -> bool {
        false
    }

    fn step_coeffs(&self, tau: f64, coords: &[f64], out: &mut StepCoeffs) -> Result<()> {
        let (r, r_tau) = scalar_curvature_and_rate(&self.cfg, tau)?;
        let q = self.big_n as f64 / (2.0 * tau) + r;
        if !(q > 0.0) {
            return Err(LabError::Integrator(format!("indefinite dtau coefficient at tau = {tau}")));
        }
        let g00 = 1.0 / q;
        out.b[0] = 1.0 + g00 / (2.0 * tau) - 0.5 * g00 * g00 * (r_tau + r / tau);
        out.sigma[0] = (2.0 * g00).sqrt();
        spatial_step_coeffs(&self.cfg, tau, coords, out)
    }

    fn frame_size(&self) -> usize {
        self.cfg.n + 1
    }

    fn transport_matrices(&self, tau: f64, x: &[f64], _chart: ChartId, out: &mut [f64]) -> Result<()> {
        let n = self.cfg.n;
        let m = n + 1;
        let lc = local_connection(&self.cfg, tau, x)?;
        let q = self.big_n as f64 / (2.0 * tau) + lc.scal;
        if !(q > 0.0) {
            return Err(LabError::Integrator(format!("indefinite dtau coefficient at tau = {tau}")));
        }
        let g00 = 1.0 / q;
        out.iter_mut().for_each(|v| *v = 0.0);
        let at = |i: usize, k: usize, j: usize| (i * m + k) * m + j;
        out[at(0, 0, 0)] = 0.5 * g00 * (lc.scal_tau + lc.scal / tau) - 0.5 / tau;
        for k in 0..n {
            for j in 0..n {
                out[at(0, k + 1, j + 1)] = lc.ric_mixed[k * n + j];
                out[at(j + 1, k + 1, 0)] = lc.ric_mixed[k * n + j];
                out[at(k + 1, 0, j + 1)] = -g00 * lc.ric_lower[k * n + j];
                for i in 0..n {
                    out[at(i + 1, k + 1, j + 1)] = lc.gamma[(k * n + i) * n + j];
                }
            }
        }
        Ok(())
    }
}

/// Parabolic Brownian motion: x by Δ_{g_τ}, τ = τ0 + s, frames by the
/// space-time connection (Γ_τ = Ric, Γ_i = Levi-Civita of g_τ).
#[derive(Debug, Clone)]
pub struct ParabolicModel {
    pub cfg: FlowConfig,
}

impl ParabolicModel {
    pub fn new(cfg: &FlowConfig) -> Self {
        Self { cfg: cfg.clone() }
    }
}

impl DiffusionModel for ParabolicModel {
    fn cfg(&self) -> &FlowConfig {
        &self.cfg
    }

    fn label(&self) -> String {
        "parabolic".into()
    }

    fn deterministic_clock(&self) -> bool {
        true
    }

    fn step_coeffs(&self, tau: f64, coords: &[f64], out: &mut StepCoeffs) -> Result<()> {
        out.b[0] = 1.0;
        out.sigma[0] = 0.0;
        spatial_step_coeffs(&self.cfg, tau, coords, out)
    }

    fn frame_size(&self) -> usize {
        self.cfg.n
    }

    fn transport_matrices(&self, tau: f64, x: &[f64], _chart: ChartId, out: &mut [f64]) -> Result<()> {
        let n = self.cfg.n;
        let lc = local_connection(&self.cfg, tau, x)?;
        out[..n * n].copy_from_slice(&lc.ric_mixed);
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[((i + 1) * n + k) * n + j] = lc.gamma[(k * n + i) * n + j];
                }
            }
        }
        Ok(())
    }
}

/// Degenerate model with a = 0 and unit τ drift, for the integrator's own
/// sanity checks.
#[derive(Debug, Clone)]
pub struct ClockOnlyModel {
    pub cfg: FlowConfig,
}

impl DiffusionModel for ClockOnlyModel {
    fn cfg(&self) -> &FlowConfig {
        &self.cfg
    }
    fn label(&self) -> String {
        "clock".into()
    }
    fn deterministic_clock(&self) -> bool {
        false
    }
    fn step_coeffs(&self, _tau: f64, _coords: &[f64], out: &mut StepCoeffs) -> Result<()> {
        out.b.iter_mut().for_each(|v| *v = 0.0);
        out.sigma.iter_mut().for_each(|v| *v = 0.0);
        out.b[0] = 1.0;
        Ok(())
    }
    fn frame_size(&self) -> usize {
        self.cfg.n
    }
    fn transport_matrices(&self, _tau: f64, _x: &[f64], _chart: ChartId, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub horizon: f64,
    pub step: f64,
    pub n_paths: usize,
    pub save_every: usize,
}

impl SimSpec {
    pub fn new(horizon: f64, step: f64, n_paths: usize) -> Self {
        Self { horizon, step, n_paths, save_every: 1 }
    }

    pub fn saving_every(mut self, k: usize) -> Self {
        self.save_every = k.max(1);
        self
    }

    /// Keep only the start and the final state.
    pub fn final_only(mut self) -> Self {
        self.save_every = self.n_steps().max(1);
        self
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }

    pub fn n_saved(&self) -> usize {
        self.n_steps() / self.save_every + 1
    }

    /// Saved index whose time is closest to s.
    pub fn saved_index(&self, s: f64) -> usize {
        ((s / (self.step * self.save_every as f64)).round() as usize).min(self.n_saved() - 1)
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(LabError::Integrator("step must be positive".into()));
        }
        if !(self.horizon >= 0.0) {
            return Err(LabError::Integrator("horizon must be non-negative".into()));
        }
        let k = self.horizon / self.step;
        if (k - k.round()).abs() > 1e-6 {
            return Err(LabError::Integrator("horizon must be a multiple of the step".into()));
        }
        if self.n_paths == 0 {
            return Err(LabError::EmptyEnsemble);
        }
        Ok(())
    }
}

/// Layout of one saved state: `[τ, coords…, chart code, frame…]`, the chart
/// code and frame present only for frame ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLayout {
    pub coord_dim: usize,
    pub chart: ChartId,
    pub frame_m: Option<usize>,
}

impl StateLayout {
    pub fn stride(&self) -> usize {
        1 + self.coord_dim + self.frame_m.map(|m| 1 + m * m).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StateRef<'a> {
    pub tau: f64,
    pub coords: &'a [f64],
    pub chart: ChartId,
    pub frame: Option<&'a [f64]>,
}

impl StateRef<'_> {
    pub fn point(&self) -> ChartPoint {
        ChartPoint::new(self.coords.to_vec(), self.tau, self.chart)
    }
}

/// One simulated path, as seen by per-path functionals.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub layout: StateLayout,
    pub data: &'a [f64],
    pub n_saved: usize,
    pub dt_saved: f64,
    pub stopped_at: Option<f64>,
    pub singular: bool,
}

impl<'a> PathView<'a> {
    pub fn state(&self, k: usize) -> StateRef<'a> {
        let st = self.layout.stride();
        let s = &self.data[k * st..(k + 1) * st];
        let cd = self.layout.coord_dim;
        match self.layout.frame_m {
            None => StateRef { tau: s[0], coords: &s[1..1 + cd], chart: self.layout.chart, frame: None },
            Some(_) => StateRef {
                tau: s[0],
                coords: &s[1..1 + cd],
                chart: ChartId::from_code(s[1 + cd]),
                frame: Some(&s[2 + cd..]),
            },
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt_saved
    }

    pub fn last(&self) -> StateRef<'a> {
        self.state(self.n_saved - 1)
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub step: f64,
    pub horizon: f64,
    pub save_every: usize,
    pub n_saved: usize,
    pub layout: StateLayout,
    pub data: Vec<f64>,
    pub stopped_at: Vec<Option<f64>>,
    pub singular: Vec<bool>,
}

impl PathEnsemble {
    pub fn path(&self, i: usize) -> PathView<'_> {
        let len = self.n_saved * self.layout.stride();
        PathView {
            layout: self.layout,
            data: &self.data[i * len..(i + 1) * len],
            n_saved: self.n_saved,
            dt_saved: self.step * self.save_every as f64,
            stopped_at: self.stopped_at[i],
            singular: self.singular[i],
        }
    }

    pub fn saved_time(&self, k: usize) -> f64 {
        k as f64 * self.step * self.save_every as f64
    }

    /// One CSV row per (path, saved time).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cd = self.layout.coord_dim;
        let mut header = vec!["path_id".to_string(), "s".into()];
        header.extend((0..cd).map(|i| format!("x{i}")));
        header.push("tau".into());
        if let Some(m) = self.layout.frame_m {
            header.push("chart".into());
            for r in 0..m {
                for c in 0..m {
                    header.push(format!("e_{r}{c}"));
                }
            }
        }
        header.push("stopped".into());
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.n_paths {
            let view = self.path(p);
            for k in 0..self.n_saved {
                let st = view.state(k);
                let s = self.saved_time(k);
                let mut row = vec![p.to_string(), fmt_num(s)];
                row.extend(st.coords.iter().map(|v| fmt_num(*v)));
                row.push(fmt_num(st.tau));
                if let Some(f) = st.frame {
                    row.push(format!("{:?}", st.chart).to_lowercase());
                    row.extend(f.iter().map(|v| fmt_num(*v)));
                }
                let stopped = view.stopped_at.map(|t| s >= t - 1e-12).unwrap_or(false);
                row.push((stopped as u8).to_string());
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// 17 significant digits, round-trip safe.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.16e}")
    }
}

struct PathBuffer {
    data: Vec<f64>,
    stopped_at: Option<f64>,
    singular: bool,
}

fn stepping_start(cfg: &FlowConfig, start: &ChartPoint) -> Result<Vec<f64>> {
    let target = cfg.background.family().stepping_chart();
    let p = chart_map(cfg, start, target)?;
    if target == ChartId::Periodic {
        // keep torus coordinates unwrapped so increments stay continuous
        Ok(start.coords.clone())
    } else {
        Ok(p.coords)
    }
}

fn retract(chart: ChartId, coords: &mut [f64]) {
    if chart == ChartId::Ambient {
        let nrm = coords.iter().map(|v| v * v).sum::<f64>().sqrt();
        coords.iter_mut().for_each(|v| *v /= nrm);
    }
}

struct Stepper<'a, M: DiffusionModel + ?Sized> {
    model: &'a M,
    dim: usize,
    sc: StepCoeffs,
    xi: Vec<f64>,
    next: Vec<f64>,
    sqrt_h: f64,
    h: f64,
    chart: ChartId,
}

impl<'a, M: DiffusionModel + ?Sized> Stepper<'a, M> {
    fn new(model: &'a M, h: f64) -> Self {
        let cfg = model.cfg();
        let dim = 1 + cfg.stepping_dim();
        Self {
            model,
            dim,
            sc: StepCoeffs::new(dim),
            xi: vec![0.0; dim],
            next: vec![0.0; dim],
            sqrt_h: h.sqrt(),
            h,
            chart: cfg.background.family().stepping_chart(),
        }
    }

    /// Advance `z` (stepping representation) by one step; returns true when
    /// the path leaves the τ-domain (z is then clamped).
    fn advance(&mut self, z: &mut [f64], k: usize, tau0: f64, rng: &mut crate::rng::PathRng) -> Result<bool> {
        rng.fill_gaussian(&mut self.xi);
        self.model.step_coeffs(z[0], &z[1..], &mut self.sc)?;
        let d = self.dim;
        for i in 0..d {
            let mut s = z[i] + self.sc.b[i] * self.h;
            let row = &self.sc.sigma[i * d..(i + 1) * d];
            let mut noise = 0.0;
            for j in 0..d {
                noise += row[j] * self.xi[j];
            }
            s += noise * self.sqrt_h;
            self.next[i] = s;
        }
        if self.model.deterministic_clock() {
            self.next[0] = tau0 + (k + 1) as f64 * self.h;
        }
        retract(self.chart, &mut self.next[1..]);
        z.copy_from_slice(&self.next);
        let cfg = self.model.cfg();
        if z[0] < cfg.delta {
            z[0] = cfg.delta;
            return Ok(true);
        }
        if z[0] > cfg.t_final {
            z[0] = cfg.t_final;
            return Ok(true);
        }
        Ok(false)
    }
}

fn run_paths<F>(spec: &SimSpec, f: F) -> Result<Vec<PathBuffer>>
where
    F: Fn(usize) -> Result<PathBuffer> + Sync + Send,
{
    spec.validate()?;
    (0..spec.n_paths).into_par_iter().map(f).collect()
}

fn assemble(spec: &SimSpec, layout: StateLayout, bufs: Vec<PathBuffer>) -> PathEnsemble {
    let n_saved = spec.n_saved();
    let mut data = Vec::with_capacity(bufs.len() * n_saved * layout.stride());
    let mut stopped_at = Vec::with_capacity(bufs.len());
    let mut singular = Vec::with_capacity(bufs.len());
    for b in bufs {
        data.extend_from_slice(&b.data);
        stopped_at.push(b.stopped_at);
        singular.push(b.singular);
    }
    PathEnsemble {
        n_paths: spec.n_paths,
        step: spec.step,
        horizon: spec.horizon,
        save_every: spec.save_every,
        n_saved,
        layout,
        data,
        stopped_at,
        singular,
    }
}

fn base_layout(cfg: &FlowConfig) -> StateLayout {
    StateLayout {
        coord_dim: cfg.stepping_dim(),
        chart: cfg.background.family().stepping_chart(),
        frame_m: None,
    }
}

fn simulate_base_path<M: DiffusionModel + ?Sized>(
    model: &M,
    start: &[f64],
    spec: &SimSpec,
    rng: &RngSpec,
    idx: usize,
) -> Result<PathBuffer> {
    let layout = base_layout(model.cfg());
    let stride = layout.stride();
    let n_saved = spec.n_saved();
    let mut data = Vec::with_capacity(n_saved * stride);
    let mut z = start.to_vec();
    data.extend_from_slice(&z);
    let mut stream = rng.path_stream(idx as u64);
    let mut stepper = Stepper::new(model, spec.step);
    let mut stopped_at = None;
    for k in 0..spec.n_steps() {
        if stopped_at.is_none() && stepper.advance(&mut z, k, start[0], &mut stream)? {
            stopped_at = Some((k + 1) as f64 * spec.step);
        }
        if (k + 1) % spec.save_every == 0 {
            data.extend_from_slice(&z);
        }
    }
    Ok(PathBuffer { data, stopped_at, singular: false })
}

fn checked_start(cfg: &FlowConfig, start: &ChartPoint) -> Result<Vec<f64>> {
    if !cfg.tau_in_range(start.tau) {
        return Err(LabError::Domain(format!("start tau = {} outside [delta, T]", start.tau)));
    }
    let mut z = vec![start.tau];
    z.extend(stepping_start(cfg, start)?);
    Ok(z)
}

/// Base paths of `model` from `start`, stored at every `save_every` steps.
pub fn simulate_base_paths<M: DiffusionModel + ?Sized>(
    model: &M,
    start: &ChartPoint,
    spec: &SimSpec,
    rng: &RngSpec,
) -> Result<PathEnsemble> {
    let z0 = checked_start(model.cfg(), start)?;
    let bufs = run_paths(spec, |i| simulate_base_path(model, &z0, spec, rng, i))?;
    Ok(assemble(spec, base_layout(model.cfg()), bufs))
}

/// Simulate base paths and reduce each one to a vector of observables
/// without keeping the ensemble. Results come back in path order.
pub fn simulate_base_observe<M, F>(
    model: &M,
    start: &ChartPoint,
    spec: &SimSpec,
    rng: &RngSpec,
    observe: F,
) -> Result<Vec<Vec<f64>>>
where
    M: DiffusionModel + ?Sized,
    F: Fn(&PathView) -> Vec<f64> + Sync,
{
    let z0 = checked_start(model.cfg(), start)?;
    let layout = base_layout(model.cfg());
    spec.validate()?;
    (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let b = simulate_base_path(model, &z0, spec, rng, i)?;
            Ok(observe(&PathView {
                layout,
                data: &b.data,
                n_saved: spec.n_saved(),
                dt_saved: spec.step * spec.save_every as f64,
                stopped_at: b.stopped_at,
                singular: false,
            }))
        })
        .collect()
}

/// Transport state for one frame path.
struct FrameTransport {
    m: usize,
    n: usize,
    dz: Vec<f64>,
    g_now: Vec<f64>,
    g_next: Vec<f64>,
    a: Vec<f64>,
    ae: Vec<f64>,
    pred: Vec<f64>,
}

impl FrameTransport {
    fn new(n: usize, m: usize) -> Self {
        let d = n + 1;
        Self {
            m,
            n,
            dz: vec![0.0; d],
            g_now: vec![0.0; d * m * m],
            g_next: vec![0.0; d * m * m],
            a: vec![0.0; m * m],
            ae: vec![0.0; m * m],
            pred: vec![0.0; m * m],
        }
    }

    fn contract(&mut self, which_next: bool) {
        let m = self.m;
        let g = if which_next { &self.g_next } else { &self.g_now };
        self.a.iter_mut().for_each(|v| *v = 0.0);
        for (i, dzi) in self.dz.iter().enumerate() {
            if *dzi == 0.0 {
                continue;
            }
            for kj in 0..m * m {
                self.a[kj] += dzi * g[i * m * m + kj];
            }
        }
    }

    fn mat_mul(m: usize, a: &[f64], e: &[f64], out: &mut [f64]) {
        for k in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for j in 0..m {
                    s += a[k * m + j] * e[j * m + b];
                }
                out[k * m + b] = s;
            }
        }
    }

    /// Heun step of e along dz with `g_now` at z_k and `g_next` at z_{k+1}.
    fn heun(&mut self, e: &mut [f64]) {
        let m = self.m;
        self.contract(false);
        Self::mat_mul(m, &self.a, e, &mut self.ae);
        for i in 0..m * m {
            self.pred[i] = e[i] - self.ae[i];
        }
        let first = self.ae.clone();
        self.contract(true);
        Self::mat_mul(m, &self.a, &self.pred, &mut self.ae);
        for i in 0..m * m {
            e[i] -= 0.5 * (first[i] + self.ae[i]);
        }
    }

    /// Apply x' = x/|x|² and push the spatial rows of e forward.
    fn switch_chart(&self, x: &mut [f64], e: &mut [f64]) {
        let n = self.n;
        let m = self.m;
        let off = m - n;
        let jac = inversion_jacobian(x);
        let old: Vec<f64> = e.to_vec();
        for i in 0..n {
            for c in 0..m {
                let mut s = 0.0;
                for k in 0..n {
                    s += jac[i * n + k] * old[(off + k) * m + c];
                }
                e[(off + i) * m + c] = s;
            }
        }
        let r2: f64 = x.iter().map(|v| v * v).sum();
        x.iter_mut().for_each(|v| *v /= r2);
    }
}

fn chart_coords(cfg: &FlowConfig, z: &[f64], chart: ChartId) -> Result<Vec<f64>> {
    match cfg.background.family().stepping_chart() {
        ChartId::Ambient => ambient_to_stereo(&z[1..], chart),
        _ => Ok(z[1..].to_vec()),
    }
}

const SWITCH_RADIUS2: f64 = 4.0;

fn frame_layout(cfg: &FlowConfig, m: usize) -> StateLayout {
    StateLayout { coord_dim: cfg.n, chart: ChartId::Periodic, frame_m: Some(m) }
}

fn push_frame_state(data: &mut Vec<f64>, tau: f64, x: &[f64], chart: ChartId, e: &[f64]) {
    data.push(tau);
    data.extend_from_slice(x);
    data.push(chart.code());
    data.extend_from_slice(e);
}

fn simulate_frame_path<M: DiffusionModel + ?Sized>(
    model: &M,
    start: &FrameState,
    spec: &SimSpec,
    rng: &RngSpec,
    idx: usize,
) -> Result<PathBuffer> {
    let cfg = model.cfg();
    let n = cfg.n;
    let m = model.frame_size();
    let layout = frame_layout(cfg, m);
    let mut data = Vec::with_capacity(spec.n_saved() * layout.stride());
    let mut z = checked_start(cfg, &start.base)?;
    let mut chart = start.base.chart;
    let mut x = start.base.coords.clone();
    let mut e = start.e.clone();
    push_frame_state(&mut data, z[0], &x, chart, &e);
    let mut stream = rng.path_stream(idx as u64);
    let mut stepper = Stepper::new(model, spec.step);
    let mut tr = FrameTransport::new(n, m);
    model.transport_matrices(z[0], &x, chart, &mut tr.g_now)?;
    let mut stopped_at = None;
    let mut singular = false;
    for k in 0..spec.n_steps() {
        if stopped_at.is_none() {
            let tau_old = z[0];
            let hit = stepper.advance(&mut z, k, start.base.tau, &mut stream)?;
            let x_new = chart_coords(cfg, &z, chart)?;
            tr.dz[0] = z[0] - tau_old;
            for i in 0..n {
                tr.dz[i + 1] = x_new[i] - x[i];
            }
            model.transport_matrices(z[0], &x_new, chart, &mut tr.g_next)?;
            tr.heun(&mut e);
            x = x_new;
            std::mem::swap(&mut tr.g_now, &mut tr.g_next);
            if chart != ChartId::Periodic && x.iter().map(|v| v * v).sum::<f64>() > SWITCH_RADIUS2 {
                tr.switch_chart(&mut x, &mut e);
                chart = if chart == ChartId::North { ChartId::South } else { ChartId::North };
                model.transport_matrices(z[0], &x, chart, &mut tr.g_now)?;
            }
            if !singular && determinant(&e, m).abs() < 1e-8 {
                singular = true;
            }
            if hit {
                stopped_at = Some((k + 1) as f64 * spec.step);
            }
        }
        if (k + 1) % spec.save_every == 0 {
            push_frame_state(&mut data, z[0], &x, chart, &e);
        }
    }
    Ok(PathBuffer { data, stopped_at, singular })
}

fn check_frame_start<M: DiffusionModel + ?Sized>(model: &M, start: &FrameState) -> Result<()> {
    let m = model.frame_size();
    if start.e.len() != m * m {
        return Err(LabError::Contract(format!("{} expects {m}x{m} frames", model.label())));
    }
    if start.base.chart == ChartId::Ambient {
        return Err(LabError::Chart("frame paths start from a stereographic chart".into()));
    }
    Ok(())
}

/// Base paths with frames, stored at every `save_every` steps. Frames are
/// expressed in the chart recorded with each state.
pub fn simulate_frame_paths<M: DiffusionModel + ?Sized>(
    model: &M,
    start: &FrameState,
    spec: &SimSpec,
    rng: &RngSpec,
) -> Result<PathEnsemble> {
    check_frame_start(model, start)?;
    let bufs = run_paths(spec, |i| simulate_frame_path(model, start, spec, rng, i))?;
    Ok(assemble(spec, frame_layout(model.cfg(), model.frame_size()), bufs))
}

pub fn simulate_frame_observe<M, F>(
    model: &M,
    start: &FrameState,
    spec: &SimSpec,
    rng: &RngSpec,
    observe: F,
) -> Result<Vec<Vec<f64>>>
where
    M: DiffusionModel + ?Sized,
    F: Fn(&PathView) -> Vec<f64> + Sync,
{
    check_frame_start(model, start)?;
    spec.validate()?;
    let layout = frame_layout(model.cfg(), model.frame_size());
    (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let b = simulate_frame_path(model, start, spec, rng, i)?;
            Ok(observe(&PathView {
                layout,
                data: &b.data,
                n_saved: spec.n_saved(),
                dt_saved: spec.step * spec.save_every as f64,
                stopped_at: b.stopped_at,
                singular: b.singular,
            }))
        })
        .collect()
}

/// Transport a frame along an already simulated base path (stored at full
/// resolution), returning the frame at every saved step in the chart
/// recorded alongside it.
pub fn transport_frame_along_path<M: DiffusionModel + ?Sized>(
    model: &M,
    path: &PathView,
    e0: &FrameState,
) -> Result<Vec<FrameState>> {
    let cfg = model.cfg();
    let n = cfg.n;
    let m = model.frame_size();
    if path.layout.frame_m.is_some() {
        return Err(LabError::Contract("expected a base path".into()));
    }
    check_frame_start(model, e0)?;
    let mut chart = e0.base.chart;
    let first = path.state(0);
    let mut z: Vec<f64> = std::iter::once(first.tau).chain(first.coords.iter().copied()).collect();
    let mut x = chart_coords(cfg, &z, chart)?;
    let mut e = e0.e.clone();
    let mut tr = FrameTransport::new(n, m);
    model.transport_matrices(z[0], &x, chart, &mut tr.g_now)?;
    let mut out = vec![FrameState { base: ChartPoint::new(x.clone(), z[0], chart), det: determinant(&e, m), e: e.clone() }];
    for k in 1..path.n_saved {
        let st = path.state(k);
        let tau_old = z[0];
        z[0] = st.tau;
        z[1..].copy_from_slice(st.coords);
        let x_new = chart_coords(cfg, &z, chart)?;
        tr.dz[0] = z[0] - tau_old;
        for i in 0..n {
            tr.dz[i + 1] = x_new[i] - x[i];
        }
        model.transport_matrices(z[0], &x_new, chart, &mut tr.g_next)?;
        tr.heun(&mut e);
        x = x_new;
        std::mem::swap(&mut tr.g_now, &mut tr.g_next);
        if chart != ChartId::Periodic && x.iter().map(|v| v * v).sum::<f64>() > SWITCH_RADIUS2 {
            tr.switch_chart(&mut x, &mut e);
            chart = if chart == ChartId::North { ChartId::South } else { ChartId::North };
            model.transport_matrices(z[0], &x, chart, &mut tr.g_now)?;
        }
        out.push(FrameState { base: ChartPoint::new(x.clone(), z[0], chart), det: determinant(&e, m), e: e.clone() });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// statistics

/// Pairwise sum with a split fixed by index, so the result does not depend
/// on how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn std(&self) -> f64 {
        self.stderr * (self.n as f64).sqrt()
    }
}

pub fn estimate(xs: &[f64]) -> Result<Estimate> {
    if xs.is_empty() {
        return Err(LabError::EmptyEnsemble);
    }
    let n = xs.len();
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return Ok(Estimate { mean, stderr: f64::NAN, n });
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Ok(Estimate { mean, stderr: (var / n as f64).sqrt(), n })
}

/// Estimate of E[a − b] from paired samples (common random numbers).
pub fn estimate_paired(a: &[f64], b: &[f64]) -> Result<Estimate> {
    if a.len() != b.len() {
        return Err(LabError::Contract("paired samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    estimate(&d)
}

/// Sample variance and the standard error of the sample variance.
pub fn variance_estimate(xs: &[f64]) -> Result<Estimate> {
    let n = xs.len();
    if n < 4 {
        return Err(LabError::EmptyEnsemble);
    }
    let mean = pairwise_sum(xs) / n as f64;
    let d2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let d4: Vec<f64> = d2.iter().map(|v| v * v).collect();
    let nf = n as f64;
    let m2 = pairwise_sum(&d2) / nf;
    let m4 = pairwise_sum(&d4) / nf;
    let var = m2 * nf / (nf - 1.0);
    let se = ((m4 - m2 * m2 * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt();
    Ok(Estimate { mean: var, stderr: se, n })
}

/// Mean and stderr of a scalar functional over an ensemble.
pub fn mc_estimate<F: Fn(&PathView) -> f64>(ens: &PathEnsemble, functional: F) -> Result<Estimate> {
    let vals: Vec<f64> = (0..ens.n_paths).map(|i| functional(&ens.path(i))).collect();
    estimate(&vals)
}

/// Paired CRN estimate of E[F(a)] − E[F(b)] over two ensembles simulated
/// with the same RngSpec.
pub fn mc_estimate_paired<F: Fn(&PathView) -> f64>(
    a: &PathEnsemble,
    b: &PathEnsemble,
    functional: F,
) -> Result<Estimate> {
    if a.n_paths != b.n_paths {
        return Err(LabError::Contract("paired ensembles differ in size".into()));
    }
    let va: Vec<f64> = (0..a.n_paths).map(|i| functional(&a.path(i))).collect();
    let vb: Vec<f64> = (0..b.n_paths).map(|i| functional(&b.path(i))).collect();
    estimate_paired(&va, &vb)
}

/// Column `j` of per-path observable vectors.
pub fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backgrounds::{FlatTorus, ShrinkingSphere};

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn constant_functional() {
        let cfg = FlowConfig::torus_default();
        let model = PerelmanModel::new(&cfg, 100);
        let start = ChartPoint::new(vec![0.0, 0.0], 0.1, ChartId::Periodic);
        let ens = simulate_base_paths(&model, &start, &SimSpec::new(0.01, 0.001, 50), &RngSpec::new(1)).unwrap();
        let e = mc_estimate(&ens, |_| 1.0).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
        let p = mc_estimate_paired(&ens, &ens, |v| v.last().tau).unwrap();
        assert_eq!(p.mean, 0.0);
    }

    #[test]
    fn clock_only_is_exact() {
        let cfg = FlowConfig::torus_default();
        let model = ClockOnlyModel { cfg: cfg.clone() };
        let start = ChartPoint::new(vec![0.3, 0.1], 0.1, ChartId::Periodic);
        let ens = simulate_base_paths(&model, &start, &SimSpec::new(0.5, 0.125, 3), &RngSpec::new(1)).unwrap();
        let st = ens.path(2).last();
        assert_eq!(st.tau, 0.6);
        assert_eq!(st.coords, &[0.3, 0.1]);
    }

    #[test]
    fn zero_horizon_is_start() {
        let cfg = FlowConfig::sphere_default();
        let model = ParabolicModel::new(&cfg);
        let start = ChartPoint::new(vec![0.0, 0.6, 0.8], 0.05, ChartId::Ambient);
        let ens = simulate_base_paths(&model, &start, &SimSpec::new(0.0, 0.01, 4), &RngSpec::new(1)).unwrap();
        assert_eq!(ens.n_saved, 1);
        assert_eq!(ens.path(3).state(0).coords, &[0.0, 0.6, 0.8]);
    }

    #[test]
    fn paths_stop_inside_the_domain() {
        let cfg = FlowConfig::new(2, 0.3, 0.05, BackgroundKind::FlatTorus(FlatTorus { side: 1.0 })).unwrap();
        let model = PerelmanModel::new(&cfg, 4);
        let start = ChartPoint::new(vec![0.0, 0.0], 0.06, ChartId::Periodic);
        let ens = simulate_base_paths(&model, &start, &SimSpec::new(0.5, 0.01, 200), &RngSpec::new(9)).unwrap();
        let mut stopped = 0;
        for i in 0..ens.n_paths {
            let p = ens.path(i);
            for k in 0..ens.n_saved {
                let t = p.state(k).tau;
                assert!(t >= cfg.delta && t <= cfg.t_final);
            }
            if let Some(s) = p.stopped_at {
                stopped += 1;
                let k = ((s / ens.step).round() as usize).min(ens.n_saved - 1);
                assert_eq!(p.state(k).tau, p.last().tau);
            }
        }
        assert!(stopped > 0);
    }

    #[test]
    fn sphere_paths_stay_on_the_sphere() {
        let cfg = FlowConfig::new(2, 0.4, 0.02, BackgroundKind::ShrinkingSphere(ShrinkingSphere { c0: 1.0 })).unwrap();
        let model = PerelmanModel::new(&cfg, 1000);
        let start = ChartPoint::new(vec![0.1, 0.2], 0.04, ChartId::North);
        let ens = simulate_base_paths(&model, &start, &SimSpec::new(0.1, 0.001, 20), &RngSpec::new(3)).unwrap();
        for i in 0..ens.n_paths {
            let y = ens.path(i).last().coords.to_vec();
            assert!((y.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_csv_shape() {
        let cfg = FlowConfig::torus_default();
        let model = PerelmanModel::new(&cfg, 100);
        let start = FrameState::new(
            ChartPoint::new(vec![0.0, 0.0], 0.1, ChartId::Periodic),
            crate::perelman::identity(3),
        )
        .unwrap();
        let ens = simulate_frame_paths(&model, &start, &SimSpec::new(0.004, 0.001, 2).saving_every(2), &RngSpec::new(1))
            .unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[0].starts_with("path_id,s,x0,x1,tau,chart,e_00"));
        assert!(lines[0].ends_with("e_22,stopped"));
    }
    #[test]
    fn fast_connection_matches_jet() {
        use crate::backgrounds::metric_jet;
        use crate::perelman::perelman_coefficients;
        for cfg in [FlowConfig::sphere_default(), FlowConfig::torus_default()] {
            for (x, chart) in [(vec![0.3, -0.7], ChartId::North), (vec![1.2, 0.4], ChartId::South)] {
                let chart = if cfg.is_sphere() { chart } else { ChartId::Periodic };
                let tau = 0.13;
                let jet = metric_jet(&cfg, &ChartPoint::new(x.clone(), tau, chart)).unwrap();
                let pc = perelman_coefficients(&jet, tau, 50).unwrap();
                let model = PerelmanModel::new(&cfg, 50);
                let mut out = vec![0.0; 27];
                model.transport_matrices(tau, &x, chart, &mut out).unwrap();
                for i in 0..3 {
                    for k in 0..3 {
                        for j in 0..3 {
                            let want = pc.gamma(k, i, j);
                            assert!((out[(i * 3 + k) * 3 + j] - want).abs() < 1e-12, "{i}{k}{j}");
                        }
                    }
                }
                let par = ParabolicModel::new(&cfg);
                let mut out = vec![0.0; 12];
                par.transport_matrices(tau, &x, chart, &mut out).unwrap();
                for k in 0..2 {
                    for j in 0..2 {
                        assert!((out[k * 2 + j] - jet.ric_mixed(k, j)).abs() < 1e-12);
                        for i in 0..2 {
                            assert!((out[((i + 1) * 2 + k) * 2 + j] - jet.gamma(k, i, j)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
