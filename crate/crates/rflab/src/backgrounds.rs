//! Closed-form Ricci-flow backgrounds in reverse time τ = 𝒯 − t.
//!
//! Two families are provided:
//!
//! ```text
//! shrinking sphere   g_τ = c(τ) ḡ,   c(τ) = c0 − 2(n−1)(𝒯 − τ)
//! flat torus         g_τ = δ_ij,     side L
//! ```
//!
//! Under reverse time the flow reads ∂g/∂τ = +2 Ric. The sphere is evaluated
//! in stereographic charts (north chart centred at (0,…,0,1)), and stepped in
//! the ambient unit-vector form.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

const TAU_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChartId {
    Periodic,
    North,
    South,
    Ambient,
}

impl ChartId {
    pub fn code(self) -> f64 {
        match self {
            ChartId::Periodic => 0.0,
            ChartId::North => 1.0,
            ChartId::South => 2.0,
            ChartId::Ambient => 3.0,
        }
    }

    pub fn from_code(c: f64) -> ChartId {
        match c as i64 {
            1 => ChartId::North,
            2 => ChartId::South,
            3 => ChartId::Ambient,
            _ => ChartId::Periodic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub coords: Vec<f64>,
    pub tau: f64,
    pub chart: ChartId,
}

impl ChartPoint {
    pub fn new(coords: Vec<f64>, tau: f64, chart: ChartId) -> Self {
        Self { coords, tau, chart }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkingSphere {
    pub c0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatTorus {
    pub side: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BackgroundKind {
    ShrinkingSphere(ShrinkingSphere),
    FlatTorus(FlatTorus),
}

impl BackgroundKind {
    pub fn family(&self) -> &dyn RicciFlowFamily {
        match self {
            BackgroundKind::ShrinkingSphere(s) => s,
            BackgroundKind::FlatTorus(t) => t,
        }
    }

    pub fn label(&self) -> &'static str {
        self.family().label()
    }
}

/// Contract every background family fulfils. Adding a family means
/// implementing this trait and a `BackgroundKind` variant.
pub trait RicciFlowFamily: Send + Sync {
    fn label(&self) -> &'static str;
    /// Chart used by the integrator for base stepping.
    fn stepping_chart(&self) -> ChartId;
    /// Chart in which derivatives at `p` are evaluated.
    fn jet_chart_for(&self, p: &ChartPoint) -> Result<ChartId>;
    fn convert(&self, n: usize, p: &ChartPoint, target: ChartId) -> Result<ChartPoint>;
    /// Full jet in a derivative chart; `coords` must already be in `chart`.
    fn jet_in_chart(&self, n: usize, calt: f64, coords: &[f64], chart: ChartId, tau: f64)
        -> Result<MetricJet>;
    fn validate(&self, n: usize, calt: f64, delta: f64) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub delta: f64,
    pub background: BackgroundKind,
}

impl FlowConfig {
    pub fn new(n: usize, t_final: f64, delta: f64, background: BackgroundKind) -> Result<Self> {
        let cfg = Self { n, t_final, delta, background };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sphere_default() -> Self {
        Self::new(2, 0.4, 0.02, BackgroundKind::ShrinkingSphere(ShrinkingSphere { c0: 1.0 }))
            .expect("default sphere config is valid")
    }

    pub fn torus_default() -> Self {
        Self::new(
            2,
            1.0,
            0.05,
            BackgroundKind::FlatTorus(FlatTorus { side: 2.0 * std::f64::consts::PI }),
        )
        .expect("default torus config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::Config("n must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(LabError::Config("delta must be positive".into()));
        }
        if !(self.delta < self.t_final) {
            return Err(LabError::Config("delta < T".into()));
        }
        self.background.family().validate(self.n, self.calt(), self.delta)
    }

    /// 𝒯 = T + δ.
    pub fn calt(&self) -> f64 {
        self.t_final + self.delta
    }

    pub fn tau_in_range(&self, tau: f64) -> bool {
        tau >= self.delta - TAU_SLACK && tau <= self.t_final + TAU_SLACK
    }

    pub fn check_tau(&self, tau: f64) -> Result<()> {
        if self.tau_in_range(tau) {
            Ok(())
        } else {
            Err(LabError::Domain(format!(
                "tau = {tau} outside [{}, {}]",
                self.delta, self.t_final
            )))
        }
    }

    pub fn is_sphere(&self) -> bool {
        matches!(self.background, BackgroundKind::ShrinkingSphere(_))
    }

    pub fn sphere(&self) -> Option<ShrinkingSphere> {
        match self.background {
            BackgroundKind::ShrinkingSphere(s) => Some(s),
            _ => None,
        }
    }

    /// Dimension of the stepping representation of a point on M.
    pub fn stepping_dim(&self) -> usize {
        match self.background.family().stepping_chart() {
            ChartId::Ambient => self.n + 1,
            _ => self.n,
        }
    }

    pub fn metric_jet(&self, p: &ChartPoint) -> Result<MetricJet> {
        metric_jet(self, p)
    }
}

/// Pointwise geometry of g_τ in one chart. Flat row-major storage, indices
/// documented on the accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricJet {
    pub n: usize,
    pub tau: f64,
    pub chart: ChartId,
    pub g: Vec<f64>,
    pub g_inv: Vec<f64>,
    /// Γ^k_ij at `[k][i][j]`.
    pub gamma: Vec<f64>,
    /// ∂_l Γ^k_ij at `[l][k][i][j]`.
    pub dgamma: Vec<f64>,
    pub dgamma_dtau: Vec<f64>,
    pub ric: Vec<f64>,
    /// ∂_l R_ij at `[l][i][j]`.
    pub dric: Vec<f64>,
    pub dric_dtau: Vec<f64>,
    /// R^k_i at `[k][i]`.
    pub ric_mixed: Vec<f64>,
    /// ∂_l R^k_i at `[l][k][i]`.
    pub dric_mixed: Vec<f64>,
    pub dric_mixed_dtau: Vec<f64>,
    pub scal: f64,
    pub dscal_dtau: f64,
    pub d2scal_dtau2: f64,
    /// ∂_i R.
    pub dscal: Vec<f64>,
    /// ∂_l ∂_i R at `[l][i]`.
    pub hess_scal: Vec<f64>,
    /// ∂_τ ∂_i R.
    pub dscal_dtau_dx: Vec<f64>,
    /// ∇^k R.
    pub grad_scal: Vec<f64>,
    /// ∂_l ∇^k R at `[l][k]`.
    pub dgrad_scal: Vec<f64>,
    pub dgrad_scal_dtau: Vec<f64>,
    pub dg_dtau: Vec<f64>,
}

impl MetricJet {
    fn zeros(n: usize, tau: f64, chart: ChartId) -> Self {
        let n2 = n * n;
        let n3 = n2 * n;
        Self {
            n,
            tau,
            chart,
            g: vec![0.0; n2],
            g_inv: vec![0.0; n2],
            gamma: vec![0.0; n3],
            dgamma: vec![0.0; n3 * n],
            dgamma_dtau: vec![0.0; n3],
            ric: vec![0.0; n2],
            dric: vec![0.0; n3],
            dric_dtau: vec![0.0; n2],
            ric_mixed: vec![0.0; n2],
            dric_mixed: vec![0.0; n3],
            dric_mixed_dtau: vec![0.0; n2],
            scal: 0.0,
            dscal_dtau: 0.0,
            d2scal_dtau2: 0.0,
            dscal: vec![0.0; n],
            hess_scal: vec![0.0; n2],
            dscal_dtau_dx: vec![0.0; n],
            grad_scal: vec![0.0; n],
            dgrad_scal: vec![0.0; n2],
            dgrad_scal_dtau: vec![0.0; n],
            dg_dtau: vec![0.0; n2],
        }
    }

    #[inline]
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.n + j]
    }
    #[inline]
    pub fn g_inv(&self, i: usize, j: usize) -> f64 {
        self.g_inv[i * self.n + j]
    }
    #[inline]
    pub fn gamma(&self, k: usize, i: usize, j: usize) -> f64 {
        self.gamma[(k * self.n + i) * self.n + j]
    }
    #[inline]
    pub fn dgamma(&self, l: usize, k: usize, i: usize, j: usize) -> f64 {
        self.dgamma[((l * self.n + k) * self.n + i) * self.n + j]
    }
    #[inline]
    pub fn dgamma_dtau(&self, k: usize, i: usize, j: usize) -> f64 {
        self.dgamma_dtau[(k * self.n + i) * self.n + j]
    }
    #[inline]
    pub fn ric(&self, i: usize, j: usize) -> f64 {
        self.ric[i * self.n + j]
    }
    #[inline]
    pub fn dric(&self, l: usize, i: usize, j: usize) -> f64 {
        self.dric[(l * self.n + i) * self.n + j]
    }
    #[inline]
    pub fn dric_dtau(&self, i: usize, j: usize) -> f64 {
        self.dric_dtau[i * self.n + j]
    }
    #[inline]
    pub fn ric_mixed(&self, k: usize, i: usize) -> f64 {
        self.ric_mixed[k * self.n + i]
    }
    #[inline]
    pub fn dric_mixed(&self, l: usize, k: usize, i: usize) -> f64 {
        self.dric_mixed[(l * self.n + k) * self.n + i]
    }
    #[inline]
    pub fn dric_mixed_dtau(&self, k: usize, i: usize) -> f64 {
        self.dric_mixed_dtau[k * self.n + i]
    }
    #[inline]
    pub fn hess_scal(&self, l: usize, i: usize) -> f64 {
        self.hess_scal[l * self.n + i]
    }
    #[inline]
    pub fn dgrad_scal(&self, l: usize, k: usize) -> f64 {
        self.dgrad_scal[l * self.n + k]
    }

    /// g^{jk} Γ^i_jk, the first-order part of Δ_g.
    pub fn laplacian_drift(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    s += self.g_inv(j, k) * self.gamma(i, j, k);
                }
            }
            *o = s;
        }
        out
    }
}

pub fn metric_jet(cfg: &FlowConfig, p: &ChartPoint) -> Result<MetricJet> {
    cfg.check_tau(p.tau)?;
    let fam = cfg.background.family();
    let chart = fam.jet_chart_for(p)?;
    if chart == p.chart {
        fam.jet_in_chart(cfg.n, cfg.calt(), &p.coords, chart, p.tau)
    } else {
        let q = fam.convert(cfg.n, p, chart)?;
        fam.jet_in_chart(cfg.n, cfg.calt(), &q.coords, chart, p.tau)
    }
}

pub fn chart_map(cfg: &FlowConfig, p: &ChartPoint, target: ChartId) -> Result<ChartPoint> {
    cfg.background.family().convert(cfg.n, p, target)
}

/// max over samples of ‖(g(τ+h) − g(τ−h))/(2h) − 2 Ric(τ)‖_F.
pub fn ricci_flow_residual(cfg: &FlowConfig, samples: &[ChartPoint], h_fd: f64) -> Result<f64> {
    ricci_flow_residual_signed(cfg, samples, h_fd, 1.0)
}

/// Same residual against `sign · 2 Ric`; `sign = −1` is the negative control.
pub fn ricci_flow_residual_signed(
    cfg: &FlowConfig,
    samples: &[ChartPoint],
    h_fd: f64,
    sign: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in samples {
        let mut plus = p.clone();
        plus.tau += h_fd;
        let mut minus = p.clone();
        minus.tau -= h_fd;
        let jp = metric_jet(cfg, &plus)?;
        let jm = metric_jet(cfg, &minus)?;
        let j0 = metric_jet(cfg, p)?;
        let mut acc = 0.0;
        for idx in 0..j0.g.len() {
            let d = (jp.g[idx] - jm.g[idx]) / (2.0 * h_fd) - sign * 2.0 * j0.ric[idx];
            acc += d * d;
        }
        worst = worst.max(acc.sqrt());
    }
    Ok(worst)
}

/// Deterministic quasi-random grid of points in the derivative chart, with τ
/// kept `margin` away from the ends of [δ, T].
pub fn sample_grid(cfg: &FlowConfig, count: usize, margin: f64) -> Vec<ChartPoint> {
    // Kronecker sequence with the generalised golden ratio.
    let dim = cfg.n + 1;
    let phi = {
        let mut x: f64 = 2.0;
        for _ in 0..50 {
            x = (1.0 + x).powf(1.0 / (dim as f64 + 1.0));
        }
        x
    };
    let alphas: Vec<f64> = (1..=dim).map(|k| (1.0 / phi.powi(k as i32)).fract()).collect();
    let lo = cfg.delta + margin;
    let hi = cfg.t_final - margin;
    (0..count)
        .map(|i| {
            let u: Vec<f64> = alphas.iter().map(|a| (0.5 + a * (i + 1) as f64).fract()).collect();
            let tau = lo + (hi - lo) * u[0];
            match cfg.background {
                BackgroundKind::FlatTorus(t) => ChartPoint::new(
                    u[1..].iter().map(|v| v * t.side).collect(),
                    tau,
                    ChartId::Periodic,
                ),
                BackgroundKind::ShrinkingSphere(_) => ChartPoint::new(
                    u[1..].iter().map(|v| 2.4 * v - 1.2).collect(),
                    tau,
                    ChartId::North,
                ),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// flat torus

impl RicciFlowFamily for FlatTorus {
    fn label(&self) -> &'static str {
        "torus"
    }

    fn stepping_chart(&self) -> ChartId {
        ChartId::Periodic
    }

    fn jet_chart_for(&self, p: &ChartPoint) -> Result<ChartId> {
        match p.chart {
            ChartId::Periodic => Ok(ChartId::Periodic),
            c => Err(LabError::Chart(format!("torus has no {c:?} chart"))),
        }
    }

    fn convert(&self, n: usize, p: &ChartPoint, target: ChartId) -> Result<ChartPoint> {
        if p.chart != ChartId::Periodic || target != ChartId::Periodic {
            return Err(LabError::Chart("torus has a single periodic chart".into()));
        }
        if p.coords.len() != n {
            return Err(LabError::InvalidPoint(format!("expected {n} coordinates")));
        }
        let coords = p.coords.iter().map(|x| x.rem_euclid(self.side)).collect();
        Ok(ChartPoint::new(coords, p.tau, ChartId::Periodic))
    }

    fn jet_in_chart(
        &self,
        n: usize,
        _calt: f64,
        coords: &[f64],
        chart: ChartId,
        tau: f64,
    ) -> Result<MetricJet> {
        if chart != ChartId::Periodic || coords.len() != n {
            return Err(LabError::InvalidPoint("torus point needs n periodic coordinates".into()));
        }
        let mut jet = MetricJet::zeros(n, tau, chart);
        for i in 0..n {
            jet.g[i * n + i] = 1.0;
            jet.g_inv[i * n + i] = 1.0;
        }
        Ok(jet)
    }

    fn validate(&self, _n: usize, _calt: f64, _delta: f64) -> Result<()> {
        if !(self.side > 0.0) {
            return Err(LabError::Config("torus side L must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shrinking round sphere

impl ShrinkingSphere {
    /// Conformal factor c(τ).
    pub fn scale(&self, n: usize, calt: f64, tau: f64) -> f64 {
        self.c0 - 2.0 * (n as f64 - 1.0) * (calt - tau)
    }

    /// dc/dτ.
    pub fn scale_rate(&self, n: usize) -> f64 {
        2.0 * (n as f64 - 1.0)
    }

    /// R(τ) = n(n−1)/c.
    pub fn scalar_curvature(&self, n: usize, calt: f64, tau: f64) -> f64 {
        let nf = n as f64;
        nf * (nf - 1.0) / self.scale(n, calt, tau)
    }
}

/// North chart coordinates from a unit ambient vector.
pub fn ambient_to_stereo(y: &[f64], chart: ChartId) -> Result<Vec<f64>> {
    let n = y.len() - 1;
    let yn = y[n];
    let denom = match chart {
        ChartId::North => 1.0 + yn,
        ChartId::South => 1.0 - yn,
        c => return Err(LabError::Chart(format!("{c:?} is not stereographic"))),
    };
    if denom < 1e-12 {
        return Err(LabError::Chart(format!("pole of the {chart:?} chart")));
    }
    Ok(y[..n].iter().map(|v| v / denom).collect())
}

pub fn stereo_to_ambient(x: &[f64], chart: ChartId) -> Result<Vec<f64>> {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let s = 1.0 + r2;
    let mut y: Vec<f64> = x.iter().map(|v| 2.0 * v / s).collect();
    let last = (1.0 - r2) / s;
    match chart {
        ChartId::North => y.push(last),
        ChartId::South => y.push(-last),
        c => return Err(LabError::Chart(format!("{c:?} is not stereographic"))),
    }
    Ok(y)
}

/// ∂x'/∂x for the north/south transition x' = x/|x|², row-major.
pub fn inversion_jacobian(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let r4 = r2 * r2;
    let mut j = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let d = if a == b { r2 } else { 0.0 };
            j[a * n + b] = (d - 2.0 * x[a] * x[b]) / r4;
        }
    }
    j
}

/// ∂y/∂x of the inverse stereographic map, `(n+1) × n` row-major.
pub fn stereo_pushforward(x: &[f64], chart: ChartId) -> Vec<f64> {
    let n = x.len();
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let s = 1.0 + r2;
    let mut j = vec![0.0; (n + 1) * n];
    for a in 0..n {
        for b in 0..n {
            let d = if a == b { 2.0 / s } else { 0.0 };
            j[a * n + b] = d - 4.0 * x[a] * x[b] / (s * s);
        }
    }
    let sign = if chart == ChartId::South { -1.0 } else { 1.0 };
    for b in 0..n {
        j[n * n + b] = sign * (-4.0 * x[b] / (s * s));
    }
    j
}

fn normalized(y: &[f64]) -> Result<Vec<f64>> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Err(LabError::InvalidPoint("ambient vector has near-zero norm".into()));
    }
    Ok(y.iter().map(|v| v / norm).collect())
}

impl RicciFlowFamily for ShrinkingSphere {
    fn label(&self) -> &'static str {
        "sphere"
    }

    fn stepping_chart(&self) -> ChartId {
        ChartId::Ambient
    }

    fn jet_chart_for(&self, p: &ChartPoint) -> Result<ChartId> {
        match p.chart {
            ChartId::North | ChartId::South => Ok(p.chart),
            ChartId::Ambient => {
                let y = normalized(&p.coords)?;
                Ok(if *y.last().unwrap() >= 0.0 { ChartId::North } else { ChartId::South })
            }
            ChartId::Periodic => Err(LabError::Chart("sphere has no periodic chart".into())),
        }
    }

    fn convert(&self, n: usize, p: &ChartPoint, target: ChartId) -> Result<ChartPoint> {
        let expected = if p.chart == ChartId::Ambient { n + 1 } else { n };
        if p.coords.len() != expected {
            return Err(LabError::InvalidPoint(format!(
                "expected {expected} coordinates for {:?}",
                p.chart
            )));
        }
        let y = match p.chart {
            ChartId::Ambient => normalized(&p.coords)?,
            ChartId::North | ChartId::South => stereo_to_ambient(&p.coords, p.chart)?,
            ChartId::Periodic => return Err(LabError::Chart("sphere has no periodic chart".into())),
        };
        let coords = match target {
            ChartId::Ambient => y,
            ChartId::North | ChartId::South => {
                if p.chart == target {
                    p.coords.clone()
                } else {
                    ambient_to_stereo(&y, target)?
                }
            }
            ChartId::Periodic => return Err(LabError::Chart("sphere has no periodic chart".into())),
        };
        Ok(ChartPoint::new(coords, p.tau, target))
    }

    fn jet_in_chart(
        &self,
        n: usize,
        calt: f64,
        x: &[f64],
        chart: ChartId,
        tau: f64,
    ) -> Result<MetricJet> {
        if !matches!(chart, ChartId::North | ChartId::South) || x.len() != n {
            return Err(LabError::InvalidPoint("sphere jets need stereographic coordinates".into()));
        }
        let c = self.scale(n, calt, tau);
        if !(c > 0.0) {
            return Err(LabError::Domain(format!("sphere has collapsed at tau = {tau}")));
        }
        let cr = self.scale_rate(n);
        let nf = n as f64;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let s = 1.0 + r2;
        let lam = 4.0 / (s * s);
        let dlam: Vec<f64> = x.iter().map(|v| -16.0 * v / (s * s * s)).collect();
        // φ = ½ log(c λ), so g = e^{2φ} δ and Γ^k_ij = δ^k_i φ_j + δ^k_j φ_i − δ_ij φ_k.
        let dphi: Vec<f64> = x.iter().map(|v| -2.0 * v / s).collect();
        let mut ddphi = vec![0.0; n * n];
        for j in 0..n {
            for l in 0..n {
                let d = if j == l { s } else { 0.0 };
                ddphi[j * n + l] = -2.0 * (d - 2.0 * x[j] * x[l]) / (s * s);
            }
        }
        let mut jet = MetricJet::zeros(n, tau, chart);
        let kd = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for i in 0..n {
            jet.g[i * n + i] = c * lam;
            jet.g_inv[i * n + i] = 1.0 / (c * lam);
            jet.dg_dtau[i * n + i] = cr * lam;
            jet.ric[i * n + i] = (nf - 1.0) * lam;
            jet.ric_mixed[i * n + i] = (nf - 1.0) / c;
            jet.dric_mixed_dtau[i * n + i] = -(nf - 1.0) * cr / (c * c);
            for l in 0..n {
                jet.dric[(l * n + i) * n + i] = (nf - 1.0) * dlam[l];
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    jet.gamma[(k * n + i) * n + j] =
                        kd(k, i) * dphi[j] + kd(k, j) * dphi[i] - kd(i, j) * dphi[k];
                    for l in 0..n {
                        jet.dgamma[((l * n + k) * n + i) * n + j] = kd(k, i) * ddphi[j * n + l]
                            + kd(k, j) * ddphi[i * n + l]
                            - kd(i, j) * ddphi[k * n + l];
                    }
                }
            }
        }
        jet.scal = nf * (nf - 1.0) / c;
        jet.dscal_dtau = -nf * (nf - 1.0) * cr / (c * c);
        jet.d2scal_dtau2 = 2.0 * nf * (nf - 1.0) * cr * cr / (c * c * c);
        Ok(jet)
    }

    fn validate(&self, n: usize, calt: f64, delta: f64) -> Result<()> {
        if n < 2 {
            return Err(LabError::Config("sphere background needs n >= 2".into()));
        }
        if !(self.c0 > 0.0) {
            return Err(LabError::Config("sphere c0 must be positive".into()));
        }
        if !(self.scale(n, calt, delta) > 0.0) {
            let bound = self.c0 / (2.0 * (n as f64 - 1.0));
            return Err(LabError::Config(format!(
                "T must be below {bound} for the sphere flow to exist on [delta, T]"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sphere_cfg_04() -> FlowConfig {
        FlowConfig::new(2, 0.38, 0.02, BackgroundKind::ShrinkingSphere(ShrinkingSphere { c0: 1.0 }))
            .unwrap()
    }

    #[test]
    fn torus_jet_is_flat() {
        let cfg = FlowConfig::torus_default();
        let jet = cfg.metric_jet(&ChartPoint::new(vec![0.3, 5.0], 0.5, ChartId::Periodic)).unwrap();
        assert_eq!(jet.scal, 0.0);
        assert!(jet.ric.iter().all(|v| *v == 0.0));
        assert!(jet.gamma.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sphere_closed_form_values() {
        let cfg = sphere_cfg_04();
        assert_abs_diff_eq!(cfg.calt(), 0.4, epsilon = 1e-15);
        let jet = cfg.metric_jet(&ChartPoint::new(vec![0.2, -0.1], 0.2, ChartId::North)).unwrap();
        let s = ShrinkingSphere { c0: 1.0 };
        assert_abs_diff_eq!(s.scale(2, 0.4, 0.2), 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(jet.scal, 10.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(jet.ric_mixed(0, 0), 5.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(jet.ric_mixed(1, 1), 5.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(jet.ric_mixed(0, 1), 0.0);
        assert_abs_diff_eq!(jet.dscal_dtau, -100.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jet.dscal_dtau, -jet.scal * jet.scal, epsilon = 1e-12);
    }

    #[test]
    fn tau_out_of_range_is_domain_error() {
        let cfg = FlowConfig::torus_default();
        let err = cfg.metric_jet(&ChartPoint::new(vec![0.0, 0.0], 1.5, ChartId::Periodic));
        assert!(matches!(err, Err(LabError::Domain(_))));
    }

    #[test]
    fn near_zero_ambient_is_invalid() {
        let cfg = FlowConfig::sphere_default();
        let err = cfg.metric_jet(&ChartPoint::new(vec![1e-10, 0.0, 0.0], 0.1, ChartId::Ambient));
        assert!(matches!(err, Err(LabError::InvalidPoint(_))));
    }

    #[test]
    fn sphere_too_long_flow_rejected() {
        let r = FlowConfig::new(2, 0.55, 0.06, BackgroundKind::ShrinkingSphere(ShrinkingSphere { c0: 1.0 }));
        assert!(matches!(r, Err(LabError::Config(_))));
    }

    #[test]
    fn delta_must_be_below_t() {
        let r = FlowConfig::new(2, 0.4, 0.6, BackgroundKind::FlatTorus(FlatTorus { side: 1.0 }));
        assert_eq!(r.unwrap_err(), LabError::Config("delta < T".into()));
    }

    #[test]
    fn torus_wraps() {
        let cfg = FlowConfig::torus_default();
        let two_pi = 2.0 * std::f64::consts::PI;
        let p = ChartPoint::new(vec![two_pi + 0.3, -0.1], 0.5, ChartId::Periodic);
        let q = chart_map(&cfg, &p, ChartId::Periodic).unwrap();
        assert_abs_diff_eq!(q.coords[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(q.coords[1], two_pi - 0.1, epsilon = 1e-12);
    }

    #[test]
    fn north_pole_is_origin() {
        let cfg = FlowConfig::sphere_default();
        let p = ChartPoint::new(vec![0.0, 0.0, 1.0], 0.1, ChartId::Ambient);
        let q = chart_map(&cfg, &p, ChartId::North).unwrap();
        assert_eq!(q.coords, vec![0.0, 0.0]);
        let south_pole = ChartPoint::new(vec![0.0, 0.0, -1.0], 0.1, ChartId::Ambient);
        assert!(matches!(chart_map(&cfg, &south_pole, ChartId::North), Err(LabError::Chart(_))));
    }

    #[test]
    fn chart_round_trip() {
        let cfg = FlowConfig::sphere_default();
        let p = ChartPoint::new(vec![0.7, -0.4], 0.1, ChartId::North);
        let s = chart_map(&cfg, &p, ChartId::South).unwrap();
        let r2: f64 = p.coords.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(s.coords[0], 0.7 / r2, epsilon = 1e-12);
        let back = chart_map(&cfg, &s, ChartId::North).unwrap();
        for (a, b) in back.coords.iter().zip(&p.coords) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_and_identities_on_grid() {
        for cfg in [FlowConfig::sphere_default(), FlowConfig::torus_default()] {
            for p in sample_grid(&cfg, 100, 0.0) {
                let jet = cfg.metric_jet(&p).unwrap();
                let n = jet.n;
                let mut fro = 0.0;
                let mut trace = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        let mut mixed = 0.0;
                        for k in 0..n {
                            s += jet.g(i, k) * jet.g_inv(k, j);
                            mixed += jet.g_inv(i, k) * jet.ric(k, j);
                        }
                        let d = s - if i == j { 1.0 } else { 0.0 };
                        fro += d * d;
                        assert_abs_diff_eq!(mixed, jet.ric_mixed(i, j), epsilon = 1e-12);
                        trace += jet.g_inv(i, j) * jet.ric(i, j);
                        assert_eq!(jet.gamma(i, j, 0), jet.gamma(i, 0, j));
                    }
                }
                assert!(fro.sqrt() < 1e-12);
                assert!((trace - jet.scal).abs() < 1e-12 * jet.scal.abs().max(1.0));
            }
        }
    }

    #[test]
    fn christoffels_match_finite_differences() {
        let cfg = FlowConfig::sphere_default();
        let h = 1e-4;
        for p in sample_grid(&cfg, 20, 0.0) {
            let jet = cfg.metric_jet(&p).unwrap();
            let n = jet.n;
            let mut dg = vec![0.0; n * n * n];
            for l in 0..n {
                let mut a = p.clone();
                a.coords[l] += h;
                let mut b = p.clone();
                b.coords[l] -= h;
                let ja = cfg.metric_jet(&a).unwrap();
                let jb = cfg.metric_jet(&b).unwrap();
                for ij in 0..n * n {
                    dg[l * n * n + ij] = (ja.g[ij] - jb.g[ij]) / (2.0 * h);
                }
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        for m in 0..n {
                            s += 0.5
                                * jet.g_inv(k, m)
                                * (dg[i * n * n + m * n + j] + dg[j * n * n + m * n + i]
                                    - dg[m * n * n + i * n + j]);
                        }
                        let exact = jet.gamma(k, i, j);
                        assert!((s - exact).abs() <= 1e-6 * exact.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let cfg = FlowConfig::sphere_default();
        let h = 1e-5;
        for p in sample_grid(&cfg, 10, 1e-3) {
            let jet = cfg.metric_jet(&p).unwrap();
            let n = jet.n;
            for l in 0..n {
                let mut a = p.clone();
                a.coords[l] += h;
                let mut b = p.clone();
                b.coords[l] -= h;
                let ja = cfg.metric_jet(&a).unwrap();
                let jb = cfg.metric_jet(&b).unwrap();
                for idx in 0..n * n * n {
                    let fd = (ja.gamma[idx] - jb.gamma[idx]) / (2.0 * h);
                    assert_abs_diff_eq!(fd, jet.dgamma[l * n * n * n + idx], epsilon = 1e-6);
                }
                for idx in 0..n * n {
                    let fd = (ja.ric[idx] - jb.ric[idx]) / (2.0 * h);
                    assert_abs_diff_eq!(fd, jet.dric[l * n * n + idx], epsilon = 1e-6);
                }
            }
            let mut a = p.clone();
            a.tau += h;
            let mut b = p.clone();
            b.tau -= h;
            let ja = cfg.metric_jet(&a).unwrap();
            let jb = cfg.metric_jet(&b).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
            assert!(rel((ja.scal - jb.scal) / (2.0 * h), jet.dscal_dtau) < 1e-6);
            assert!(rel((ja.dscal_dtau - jb.dscal_dtau) / (2.0 * h), jet.d2scal_dtau2) < 1e-6);
            for idx in 0..n * n {
                let fd = (ja.ric_mixed[idx] - jb.ric_mixed[idx]) / (2.0 * h);
                assert!(rel(fd, jet.dric_mixed_dtau[idx]) < 1e-6);
                let fd = (ja.g[idx] - jb.g[idx]) / (2.0 * h);
                assert!(rel(fd, jet.dg_dtau[idx]) < 1e-6);
            }
        }
    }

    #[test]
    fn flow_residual_and_negative_control() {
        let sphere = FlowConfig::sphere_default();
        let torus = FlowConfig::torus_default();
        let sp = sample_grid(&sphere, 100, 1e-3);
        let tp = sample_grid(&torus, 100, 1e-3);
        assert_eq!(ricci_flow_residual(&torus, &tp, 1e-4).unwrap(), 0.0);
        assert!(ricci_flow_residual(&sphere, &sp, 1e-4).unwrap() <= 1e-6);
        assert!(ricci_flow_residual_signed(&sphere, &sp, 1e-4, -1.0).unwrap() > 1e-2);
    }
}
