//! Projected generators of Brownian motion on Perelman's manifold and their
//! N → ∞ limits.
//!
//! Operators use the convention a^{ij}∂_i∂_j + b^i∂_i with no ½, so the
//! matching SDE has noise factor σ with σσᵀ = 2a.
//!
//! Frame functions are evaluated on the argument vector
//! `[τ, x¹..xⁿ, e^0_0, e^0_1, …, e^n_n]` (frame rows = block index,
//! columns = frame label), written `w` below.

use crate::backgrounds::{ChartPoint, MetricJet};
use crate::error::{LabError, Result};
use crate::perelman::{block_connection_jet, perelman_coefficients, BlockConnectionJet};

// ---------------------------------------------------------------------------
// test functions

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    /// Reads `[τ, x]` only, `d = n + 1`.
    Base { d: usize },
    /// Reads `[τ, x, e]` with an m×m frame.
    Frame { d: usize, m: usize },
}

impl Arity {
    pub fn len(&self) -> usize {
        match *self {
            Arity::Base { d } => d,
            Arity::Frame { d, m } => d + m * m,
        }
    }
}

pub trait TestFunction: Sync {
    fn arity(&self) -> Arity;
    fn eval(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64]) -> Vec<f64>;
    /// Row-major Hessian.
    fn hess(&self, w: &[f64]) -> Vec<f64>;

    fn len(&self) -> usize {
        self.arity().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    Pow { var: usize, p: u32 },
    Cos { var: usize, freq: f64, phase: f64 },
    Exp { var: usize, rate: f64 },
}

impl Factor {
    pub fn var(&self) -> usize {
        match *self {
            Factor::Pow { var, .. } | Factor::Cos { var, .. } | Factor::Exp { var, .. } => var,
        }
    }

    fn jet(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            Factor::Pow { p, .. } => {
                let pf = p as f64;
                let v = x.powi(p as i32);
                let d1 = if p >= 1 { pf * x.powi(p as i32 - 1) } else { 0.0 };
                let d2 = if p >= 2 { pf * (pf - 1.0) * x.powi(p as i32 - 2) } else { 0.0 };
                (v, d1, d2)
            }
            Factor::Cos { freq, phase, .. } => {
                let a = freq * x + phase;
                (a.cos(), -freq * a.sin(), -freq * freq * a.cos())
            }
            Factor::Exp { rate, .. } => {
                let v = (rate * x).exp();
                (v, rate * v, rate * rate * v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub factors: Vec<Factor>,
}

/// Sum of products of powers, cosines and exponentials of single arguments,
/// with exact derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTrig {
    pub arity: Arity,
    pub terms: Vec<Term>,
}

impl PolyTrig {
    pub fn new(arity: Arity) -> Self {
        Self { arity, terms: Vec::new() }
    }

    pub fn term(mut self, coef: f64, factors: Vec<Factor>) -> Self {
        let len = self.arity.len();
        assert!(factors.iter().all(|f| f.var() < len), "factor reads past the arity");
        self.terms.push(Term { coef, factors });
        self
    }
}

pub fn pw(var: usize, p: u32) -> Factor {
    Factor::Pow { var, p }
}
pub fn cs(var: usize, freq: f64, phase: f64) -> Factor {
    Factor::Cos { var, freq, phase }
}
pub fn sn(var: usize, freq: f64) -> Factor {
    Factor::Cos { var, freq, phase: -std::f64::consts::FRAC_PI_2 }
}
pub fn ex(var: usize, rate: f64) -> Factor {
    Factor::Exp { var, rate }
}

impl TestFunction for PolyTrig {
    fn arity(&self) -> Arity {
        self.arity
    }

    fn eval(&self, w: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.factors.iter().map(|f| f.jet(w[f.var()]).0).product::<f64>())
            .sum()
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.arity.len()];
        for t in &self.terms {
            let jets: Vec<(f64, f64, f64)> = t.factors.iter().map(|f| f.jet(w[f.var()])).collect();
            for (k, f) in t.factors.iter().enumerate() {
                let mut p = t.coef * jets[k].1;
                for (j, jt) in jets.iter().enumerate() {
                    if j != k {
                        p *= jt.0;
                    }
                }
                g[f.var()] += p;
            }
        }
        g
    }

    fn hess(&self, w: &[f64]) -> Vec<f64> {
        let len = self.arity.len();
        let mut h = vec![0.0; len * len];
        for t in &self.terms {
            let jets: Vec<(f64, f64, f64)> = t.factors.iter().map(|f| f.jet(w[f.var()])).collect();
            let nf = t.factors.len();
            for k in 0..nf {
                let vk = t.factors[k].var();
                let mut p = t.coef * jets[k].2;
                for (j, jt) in jets.iter().enumerate() {
                    if j != k {
                        p *= jt.0;
                    }
                }
                h[vk * len + vk] += p;
                for l in 0..nf {
                    if l == k {
                        continue;
                    }
                    let vl = t.factors[l].var();
                    let mut p = t.coef * jets[k].1 * jets[l].1;
                    for (j, jt) in jets.iter().enumerate() {
                        if j != k && j != l {
                            p *= jt.0;
                        }
                    }
                    h[vk * len + vl] += p;
                }
            }
        }
        h
    }
}

/// ψ̂ = ψ ∘ 𝔦 on the Ricci-flow frame bundle, where 𝔦(u) is the block frame
/// with e^0_0 = 1, spatial block u and zero off-diagonal blocks. Reads
/// `[τ, x, u]` with u an n×n frame.
pub struct InclusionPullback<'a> {
    pub inner: &'a dyn TestFunction,
    pub n: usize,
}

impl InclusionPullback<'_> {
    fn lift(&self, w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let m = n + 1;
        let mut out = vec![0.0; m + m * m];
        out[..m].copy_from_slice(&w[..m]);
        out[m] = 1.0;
        for i in 0..n {
            for a in 0..n {
                out[m + (i + 1) * m + a + 1] = w[m + i * n + a];
            }
        }
        out
    }

    fn index_map(&self) -> Vec<usize> {
        let n = self.n;
        let m = n + 1;
        let mut map: Vec<usize> = (0..m).collect();
        for i in 0..n {
            for a in 0..n {
                map.push(m + (i + 1) * m + a + 1);
            }
        }
        map
    }
}

impl TestFunction for InclusionPullback<'_> {
    fn arity(&self) -> Arity {
        Arity::Frame { d: self.n + 1, m: self.n }
    }

    fn eval(&self, w: &[f64]) -> f64 {
        self.inner.eval(&self.lift(w))
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let g = self.inner.grad(&self.lift(w));
        self.index_map().iter().map(|&i| g[i]).collect()
    }

    fn hess(&self, w: &[f64]) -> Vec<f64> {
        let full = self.inner.len();
        let h = self.inner.hess(&self.lift(w));
        let map = self.index_map();
        let mut out = Vec::with_capacity(map.len() * map.len());
        for &a in &map {
            for &b in &map {
                out.push(h[a * full + b]);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// scalar generator

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCoeffs {
    pub coord_names: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GeneratorCoeffs {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// a^{ij}H_ij + b^i g_i.
    pub fn apply(&self, grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            s += self.b[i] * grad[i];
            for j in 0..d {
                s += self.a[i * d + j] * hess[i * d + j];
            }
        }
        s
    }
}

pub fn base_coord_names(n: usize) -> Vec<String> {
    std::iter::once("tau".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect()
}

/// Coefficients of the projected Laplacian of G on functions of (τ, x).
pub fn scalar_generator(jet: &MetricJet, tau: f64, big_n: u64) -> Result<GeneratorCoeffs> {
    let pc = perelman_coefficients(jet, tau, big_n)?;
    let g00 = pc.g00_inv;
    let n = jet.n;
    let d = n + 1;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    a[0] = g00;
    b[0] = 1.0 + g00 / (2.0 * tau) - 0.5 * g00 * g00 * (jet.dscal_dtau + jet.scal / tau);
    let ld = jet.laplacian_drift();
    for i in 0..n {
        for j in 0..n {
            a[(i + 1) * d + j + 1] = jet.g_inv(i, j);
        }
        b[i + 1] = -ld[i] + 0.5 * g00 * jet.grad_scal[i];
    }
    Ok(GeneratorCoeffs { coord_names: base_coord_names(n), a, b })
}

/// (∂_τ + Δ_{g_τ}) f on `[τ, x]`.
pub fn heat_operator_apply(f: &dyn TestFunction, w: &[f64], jet: &MetricJet) -> f64 {
    let n = jet.n;
    let d = n + 1;
    let g = f.grad(w);
    let h = f.hess(w);
    let ld = jet.laplacian_drift();
    let mut s = g[0];
    for i in 0..n {
        s -= ld[i] * g[i + 1];
        for j in 0..n {
            s += jet.g_inv(i, j) * h[(i + 1) * d + j + 1];
        }
    }
    s
}

fn base_args(p: &ChartPoint) -> Vec<f64> {
    std::iter::once(p.tau).chain(p.coords.iter().copied()).collect()
}

fn check_base(f: &dyn TestFunction, n: usize) -> Result<()> {
    match f.arity() {
        Arity::Base { d } if d == n + 1 => Ok(()),
        a => Err(LabError::Contract(format!("expected a base function of (tau, x), got {a:?}"))),
    }
}

/// Projected generator minus the Ricci-flow heat operator, at `p`.
pub fn scalar_defect(f: &dyn TestFunction, p: &ChartPoint, jet: &MetricJet, big_n: u64) -> Result<f64> {
    check_base(f, jet.n)?;
    let w = base_args(p);
    let gc = scalar_generator(jet, p.tau, big_n)?;
    Ok(gc.apply(&f.grad(&w), &f.hess(&w)) - heat_operator_apply(f, &w, jet))
}

/// The closed-form defect
/// (1/(N+2τR) − (G^{00})²/2 (∂_τR + R/τ)) ∂_τf + G^{00}(∂²_τf + ½∇^iR ∂_if).
pub fn epsilon_n(f: &dyn TestFunction, p: &ChartPoint, jet: &MetricJet, big_n: u64) -> Result<f64> {
    check_base(f, jet.n)?;
    let pc = perelman_coefficients(jet, p.tau, big_n)?;
    let g00 = pc.g00_inv;
    let tau = p.tau;
    let w = base_args(p);
    let g = f.grad(&w);
    let h = f.hess(&w);
    let nf = big_n as f64;
    let mut s = (1.0 / (nf + 2.0 * tau * jet.scal)
        - 0.5 * g00 * g00 * (jet.dscal_dtau + jet.scal / tau))
        * g[0];
    let mut grad_term = 0.0;
    for i in 0..jet.n {
        grad_term += jet.grad_scal[i] * g[i + 1];
    }
    s += g00 * (h[0] + 0.5 * grad_term);
    Ok(s)
}

// ---------------------------------------------------------------------------
// frame states and connections

#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub base: ChartPoint,
    /// Row-major (n+1)×(n+1), `e[r*m + c] = e^r_c`.
    pub e: Vec<f64>,
    pub det: f64,
}

impl FrameState {
    pub fn new(base: ChartPoint, e: Vec<f64>) -> Result<Self> {
        let m = base.coords.len() + 1;
        if e.len() != m * m {
            return Err(LabError::Contract(format!("frame must be {m}x{m}")));
        }
        let det = determinant(&e, m);
        if det.abs() < 1e-12 {
            return Err(LabError::Contract("frame is singular".into()));
        }
        Ok(Self { base, e, det })
    }

    /// An n×n frame of T_xM (the Ricci-flow frame bundle).
    pub fn spatial(base: ChartPoint, u: Vec<f64>) -> Result<Self> {
        let n = base.coords.len();
        if u.len() != n * n {
            return Err(LabError::Contract(format!("frame must be {n}x{n}")));
        }
        let det = determinant(&u, n);
        if det.abs() < 1e-12 {
            return Err(LabError::Contract("frame is singular".into()));
        }
        Ok(Self { base, e: u, det })
    }

    /// 𝔦(u): e^0_0 = 1, spatial block u, zero off-diagonal blocks.
    pub fn included(base: ChartPoint, u: &[f64]) -> Result<Self> {
        let n = base.coords.len();
        Self::new(base, include_frame(u, n))
    }

    pub fn m(&self) -> usize {
        self.base.coords.len() + 1
    }

    pub fn args(&self) -> Vec<f64> {
        let mut w = base_args(&self.base);
        w.extend_from_slice(&self.e);
        w
    }

    /// Spatial block e^j_b, n×n.
    pub fn spatial_block(&self) -> Vec<f64> {
        let m = self.m();
        let n = m - 1;
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for a in 0..n {
                u[i * n + a] = self.e[(i + 1) * m + a + 1];
            }
        }
        u
    }
}

pub fn include_frame(u: &[f64], n: usize) -> Vec<f64> {
    let m = n + 1;
    let mut e = vec![0.0; m * m];
    e[0] = 1.0;
    for i in 0..n {
        for a in 0..n {
            e[(i + 1) * m + a + 1] = u[i * n + a];
        }
    }
    e
}

pub fn determinant(a: &[f64], m: usize) -> f64 {
    let mut lu = a.to_vec();
    let mut det = 1.0;
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if lu[r * m + col].abs() > lu[piv * m + col].abs() {
                piv = r;
            }
        }
        if lu[piv * m + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..m {
                lu.swap(col * m + c, piv * m + c);
            }
            det = -det;
        }
        let p = lu[col * m + col];
        det *= p;
        for r in col + 1..m {
            let f = lu[r * m + col] / p;
            for c in col..m {
                lu[r * m + c] -= f * lu[col * m + c];
            }
        }
    }
    det
}

/// Connection coefficients acting on frames over a d-dimensional base:
/// 𝒟_i = ∂_i − (Γ_i e)^k_b ∂/∂e^k_b, where Γ_i is an m×m matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConnection {
    pub d: usize,
    pub m: usize,
    /// `[i][k][j]`.
    pub gamma: Vec<f64>,
    /// `[l][i][k][j]` = ∂_l Γ_i[k][j].
    pub dgamma: Vec<f64>,
}

impl FrameConnection {
    /// Block connection of G: Γ_i[k][j] = Γ^k_ij.
    pub fn from_block(bj: &BlockConnectionJet) -> Self {
        let m = bj.coeffs.m();
        let mut gamma = vec![0.0; m * m * m];
        let mut dgamma = vec![0.0; m * m * m * m];
        for i in 0..m {
            for k in 0..m {
                for j in 0..m {
                    gamma[(i * m + k) * m + j] = bj.coeffs.gamma(k, i, j);
                    for l in 0..m {
                        dgamma[((l * m + i) * m + k) * m + j] = bj.dgamma[((l * m + k) * m + i) * m + j];
                    }
                }
            }
        }
        Self { d: m, m, gamma, dgamma }
    }

    /// Space-time connection of the Ricci flow on n×n frames over `[τ, x]`:
    /// Γ_τ = R^k_j and Γ_i = Γ^k_ij of g_τ.
    pub fn ricci_flow(jet: &MetricJet) -> Self {
        let n = jet.n;
        let d = n + 1;
        let mut gamma = vec![0.0; d * n * n];
        let mut dgamma = vec![0.0; d * d * n * n];
        for k in 0..n {
            for j in 0..n {
                gamma[k * n + j] = jet.ric_mixed(k, j);
                dgamma[k * n + j] = jet.dric_mixed_dtau(k, j);
                for l in 0..n {
                    dgamma[(((l + 1) * d) * n + k) * n + j] = jet.dric_mixed(l, k, j);
                }
                for i in 0..n {
                    gamma[((i + 1) * n + k) * n + j] = jet.gamma(k, i, j);
                    dgamma[((i + 1) * n + k) * n + j] = jet.dgamma_dtau(k, i, j);
                    for l in 0..n {
                        dgamma[(((l + 1) * d + i + 1) * n + k) * n + j] = jet.dgamma(l, k, i, j);
                    }
                }
            }
        }
        Self { d, m: n, gamma, dgamma }
    }

    #[inline]
    fn g(&self, i: usize, k: usize, j: usize) -> f64 {
        self.gamma[(i * self.m + k) * self.m + j]
    }

    #[inline]
    fn dg(&self, l: usize, i: usize, k: usize, j: usize) -> f64 {
        self.dgamma[((l * self.d + i) * self.m + k) * self.m + j]
    }

    fn mat_e(&self, i: usize, e: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m * m];
        for k in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for j in 0..m {
                    s += self.g(i, k, j) * e[j * m + b];
                }
                out[k * m + b] = s;
            }
        }
        out
    }

    /// Vector field 𝒟_i in w-coordinates.
    pub fn field(&self, i: usize, e: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.d + self.m * self.m];
        v[i] = 1.0;
        for (slot, x) in v[self.d..].iter_mut().zip(self.mat_e(i, e)) {
            *slot = -x;
        }
        v
    }

    /// e-component of ∂_{V_l} V_i: −(∂_lΓ_i)e + Γ_iΓ_l e.
    fn field_derivative(&self, l: usize, i: usize, e: &[f64]) -> Vec<f64> {
        let m = self.m;
        let gl_e = self.mat_e(l, e);
        let mut out = vec![0.0; m * m];
        for k in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for j in 0..m {
                    s += -self.dg(l, i, k, j) * e[j * m + b] + self.g(i, k, j) * gl_e[j * m + b];
                }
                out[k * m + b] = s;
            }
        }
        out
    }
}

/// First and second frame derivatives 𝒟_iψ and 𝒟_l𝒟_iψ at one point.
pub struct FrameDerivatives {
    pub d: usize,
    pub first: Vec<f64>,
    /// `[l][i]` = 𝒟_l 𝒟_i ψ.
    pub second: Vec<f64>,
}

pub fn frame_derivatives(conn: &FrameConnection, w: &[f64], grad: &[f64], hess: &[f64]) -> FrameDerivatives {
    let d = conn.d;
    let m = conn.m;
    let len = d + m * m;
    let e = &w[d..];
    let fields: Vec<Vec<f64>> = (0..d).map(|i| conn.field(i, e)).collect();
    let hv: Vec<Vec<f64>> = fields
        .iter()
        .map(|v| {
            (0..len)
                .map(|r| {
                    let row = &hess[r * len..(r + 1) * len];
                    row.iter().zip(v).map(|(a, b)| a * b).sum()
                })
                .collect()
        })
        .collect();
    let first: Vec<f64> = fields.iter().map(|v| v.iter().zip(grad).map(|(a, b)| a * b).sum()).collect();
    let mut second = vec![0.0; d * d];
    for l in 0..d {
        for i in 0..d {
            let mut s: f64 = fields[l].iter().zip(&hv[i]).map(|(a, b)| a * b).sum();
            let dv = conn.field_derivative(l, i, e);
            s += dv.iter().zip(&grad[d..]).map(|(a, b)| a * b).sum::<f64>();
            second[l * d + i] = s;
        }
    }
    FrameDerivatives { d, first, second }
}

fn check_frame(psi: &dyn TestFunction, state: &FrameState) -> Result<()> {
    let m = state.m();
    match psi.arity() {
        Arity::Frame { d, m: mm } if d == m && mm == m => Ok(()),
        a => Err(LabError::Contract(format!("expected a block-frame function, got {a:?}"))),
    }
}

/// Second-order coefficients G^{𝕚𝕝} and drift −Σ_{JK} G^{JK}Γ^𝕚_JK of L^N,
/// acting through the frame derivatives 𝒟_𝕚.
pub fn frame_generator_coeffs(bj: &BlockConnectionJet, jet: &MetricJet) -> GeneratorCoeffs {
    let pc = &bj.coeffs;
    let n = jet.n;
    let m = n + 1;
    let mut a = vec![0.0; m * m];
    a[0] = pc.g00_inv;
    for i in 0..n {
        for j in 0..n {
            a[(i + 1) * m + j + 1] = jet.g_inv(i, j);
        }
    }
    let mut b = vec![0.0; m];
    for (k, bk) in b.iter_mut().enumerate() {
        let mut s = pc.g00_inv * pc.gamma(k, 0, 0);
        for i in 0..n {
            for j in 0..n {
                s += jet.g_inv(i, j) * pc.gamma(k, i + 1, j + 1);
            }
        }
        if k == 0 {
            s += pc.sphere_trace_time;
        }
        *bk = -s;
    }
    GeneratorCoeffs { coord_names: base_coord_names(n), a, b }
}

/// L^N ψ = G^{𝕚𝕝}𝒟_𝕝𝒟_𝕚ψ − (Σ G^{JK}Γ^𝕚_JK)𝒟_𝕚ψ, with the sphere trace
/// included in the 𝕚 = 0 drift.
pub fn frame_generator_apply(
    psi: &dyn TestFunction,
    state: &FrameState,
    jet: &MetricJet,
    big_n: u64,
) -> Result<f64> {
    check_frame(psi, state)?;
    let bj = block_connection_jet(jet, state.base.tau, big_n)?;
    let conn = FrameConnection::from_block(&bj);
    let gc = frame_generator_coeffs(&bj, jet);
    let w = state.args();
    let fd = frame_derivatives(&conn, &w, &psi.grad(&w), &psi.hess(&w));
    let m = conn.d;
    let mut s = 0.0;
    for i in 0..m {
        s += gc.b[i] * fd.first[i];
        for l in 0..m {
            s += gc.a[i * m + l] * fd.second[l * m + i];
        }
    }
    Ok(s)
}

/// Symmetric coefficient matrix of the second derivatives of ψ in L^N,
/// Σ G^{𝕚𝕝} V_𝕚 V_𝕝ᵀ over w-coordinates.
pub fn frame_generator_diffusion(state: &FrameState, jet: &MetricJet, big_n: u64) -> Result<Vec<f64>> {
    let bj = block_connection_jet(jet, state.base.tau, big_n)?;
    let conn = FrameConnection::from_block(&bj);
    let gc = frame_generator_coeffs(&bj, jet);
    let m = conn.d;
    let len = m + m * m;
    let fields: Vec<Vec<f64>> = (0..m).map(|i| conn.field(i, &state.e)).collect();
    let mut out = vec![0.0; len * len];
    for i in 0..m {
        for l in 0..m {
            let a = gc.a[i * m + l];
            if a == 0.0 {
                continue;
            }
            for r in 0..len {
                for c in 0..len {
                    out[r * len + c] += a * fields[i][r] * fields[l][c];
                }
            }
        }
    }
    Ok(out)
}

/// Correction for the horizontal Laplacian of the full chart at a lift with
/// no sphere leakage: there the sphere columns H_α also act through
/// −E^α Γ^0_αβ E^β_𝕓 ∂/∂E^0_𝕓, adding −(G^{00}N/(4τ²)) Σ_𝕓 e^0_𝕓 ∂ψ/∂e^0_𝕓.
pub fn sphere_leakage_correction(
    psi: &dyn TestFunction,
    state: &FrameState,
    jet: &MetricJet,
    big_n: u64,
) -> Result<f64> {
    check_frame(psi, state)?;
    let pc = perelman_coefficients(jet, state.base.tau, big_n)?;
    let m = state.m();
    let w = state.args();
    let g = psi.grad(&w);
    let mut s = 0.0;
    for b in 0..m {
        s += state.e[b] * g[m + b];
    }
    let tau = state.base.tau;
    Ok(-pc.g00_inv * big_n as f64 / (4.0 * tau * tau) * s)
}

// ---------------------------------------------------------------------------
// limit operators

/// How the 𝒩 operator is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexConvention {
    /// First term summed over 𝕓 ∈ {0..n}, remaining terms as displayed.
    FullBlock,
    /// First term summed over b ∈ {1..n} only.
    SpatialOnly,
    /// Term-by-term expansion of g^{iℓ}𝒟_ℓ𝒟_i: `FullBlock` plus the bracket
    /// terms carrying a block index 0 (see [`bracket_zero_terms`]) and both
    /// halves of the mixed ∂_x∂_e term (see [`omitted_cross_terms`]), with
    /// every term containing an index 0 assigned to 𝒩.
    Regrouped,
}

impl IndexConvention {
    pub const ALL: [IndexConvention; 3] =
        [IndexConvention::FullBlock, IndexConvention::SpatialOnly, IndexConvention::Regrouped];

    pub fn label(&self) -> &'static str {
        match self {
            IndexConvention::FullBlock => "full_block",
            IndexConvention::SpatialOnly => "spatial_only",
            IndexConvention::Regrouped => "regrouped",
        }
    }
}

/// Accessors for ψ derivatives in block layout with spatial indices 0-based.
struct BlockView<'a> {
    m: usize,
    w: &'a [f64],
    g: &'a [f64],
    h: &'a [f64],
    len: usize,
}

impl BlockView<'_> {
    /// w-index of e^r_c in block indexing.
    fn ei(&self, r: usize, c: usize) -> usize {
        self.m + r * self.m + c
    }
    fn e(&self, r: usize, c: usize) -> f64 {
        self.w[self.ei(r, c)]
    }
    fn ge(&self, r: usize, c: usize) -> f64 {
        self.g[self.ei(r, c)]
    }
    fn h(&self, a: usize, b: usize) -> f64 {
        self.h[a * self.len + b]
    }
}

/// Γ^r_{ℓ𝕞} of the limit connection with 𝕞 in block indexing:
/// 𝕞 = 0 gives R^r_ℓ, 𝕞 = m+1 gives γ^r_{ℓm}.
fn limit_gamma(jet: &MetricJet, r: usize, l: usize, mm: usize) -> f64 {
    if mm == 0 {
        jet.ric_mixed(r, l)
    } else {
        jet.gamma(r, l, mm - 1)
    }
}

/// 𝒟ψ and 𝒩ψ as displayed for the limit, on a block frame state.
pub fn asymptotic_operators_apply(
    psi: &dyn TestFunction,
    state: &FrameState,
    jet: &MetricJet,
    convention: IndexConvention,
) -> Result<(f64, f64)> {
    check_frame(psi, state)?;
    let n = jet.n;
    let m = n + 1;
    let tau = state.base.tau;
    let w = state.args();
    let g = psi.grad(&w);
    let h = psi.hess(&w);
    let v = BlockView { m, w: &w, g: &g, h: &h, len: w.len() };
    let x = |l: usize| l + 1;
    let ginv = |i: usize, l: usize| jet.g_inv(i, l);
    let gm = |k: usize, i: usize, j: usize| jet.gamma(k, i, j);

    // 𝒟
    let mut dval = 0.0;
    for i in 0..n {
        for l in 0..n {
            let gil = ginv(i, l);
            if gil == 0.0 {
                continue;
            }
            let mut s = v.h(x(l), x(i));
            for j in 0..n {
                for b in 0..n {
                    let ejb = v.e(j + 1, b + 1);
                    for k in 0..n {
                        let mut inner = jet.dgamma(l, k, i, j) * v.ge(k + 1, b + 1)
                            + gm(k, i, j) * v.h(x(l), v.ei(k + 1, b + 1));
                        for mm in 0..n {
                            for c in 0..n {
                                let emc = v.e(mm + 1, c + 1);
                                for r in 0..n {
                                    inner -= emc
                                        * gm(r, l, mm)
                                        * gm(k, i, j)
                                        * v.h(v.ei(r + 1, c + 1), v.ei(k + 1, b + 1));
                                }
                            }
                        }
                        s -= ejb * inner;
                    }
                }
            }
            for mm in 0..n {
                for c in 0..n {
                    let emc = v.e(mm + 1, c + 1);
                    for r in 0..n {
                        for k in 0..n {
                            s += emc * gm(r, l, mm) * gm(k, i, r) * v.ge(k + 1, c + 1);
                        }
                    }
                }
            }
            dval += gil * s;
        }
    }
    let ld = jet.laplacian_drift();
    for i in 0..n {
        let mut s = v.g[x(i)];
        for k in 0..n {
            for j in 0..n {
                for b in 0..n {
                    s -= gm(k, i, j) * v.e(j + 1, b + 1) * v.ge(k + 1, b + 1);
                }
            }
        }
        dval -= ld[i] * s;
    }
    dval += v.g[0];
    for j in 0..n {
        for b in 0..n {
            for k in 0..n {
                dval -= v.e(j + 1, b + 1) * jet.ric_mixed(k, j) * v.ge(k + 1, b + 1);
            }
        }
    }

    // 𝒩
    let b_kj = |k: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for l in 0..n {
                let gil = ginv(i, l);
                if gil == 0.0 {
                    continue;
                }
                let mut t = -jet.dgamma(l, k, i, j);
                for r in 0..n {
                    t += gm(r, i, l) * gm(k, r, j) + gm(r, l, j) * gm(k, i, r);
                }
                s += gil * t;
            }
        }
        s - jet.ric_mixed(k, j)
    };
    let b_k = |k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for l in 0..n {
                let gil = ginv(i, l);
                if gil == 0.0 {
                    continue;
                }
                let mut t = -jet.dric_mixed(l, k, i);
                for r in 0..n {
                    t += gm(r, i, l) * jet.ric_mixed(k, r) + jet.ric_mixed(r, l) * gm(k, i, r);
                }
                s += gil * t;
            }
        }
        s + 0.5 * jet.grad_scal[k]
    };
    let first_lo = match convention {
        IndexConvention::SpatialOnly => 1,
        _ => 0,
    };
    let mut nval = 0.0;
    for bb in first_lo..m {
        nval += v.e(0, bb) * v.ge(0, bb) / (2.0 * tau);
    }
    for j in 0..n {
        let ej0 = v.e(j + 1, 0);
        for k in 0..n {
            nval += ej0 * b_kj(k, j) * v.ge(k + 1, 0);
        }
    }
    for k in 0..n {
        let bk = b_k(k);
        for bb in 0..m {
            nval += v.e(0, bb) * bk * v.ge(k + 1, bb);
        }
    }
    for i in 0..n {
        for l in 0..n {
            let gil = ginv(i, l);
            if gil == 0.0 {
                continue;
            }
            for k in 0..n {
                // −e^j_0 g^{iℓ}Γ^k_ij [∂_ℓ ∂_{k0} − Γ^r_{ℓ𝕞} e^𝕞_𝕔 ∂_{r𝕔}∂_{k0}]
                let mut cj = 0.0;
                for j in 0..n {
                    cj += v.e(j + 1, 0) * gm(k, i, j);
                }
                // −g^{iℓ}R^k_i e^0_𝕓 [∂_ℓ ∂_{k𝕓} − Γ^r_{ℓ𝕞} e^𝕞_𝕔 ∂_{r𝕔}∂_{k𝕓}]
                let rk = jet.ric_mixed(k, i);
                for bb in 0..m {
                    let coef = if bb == 0 { cj } else { 0.0 } + rk * v.e(0, bb);
                    if coef == 0.0 {
                        continue;
                    }
                    let kb = v.ei(k + 1, bb);
                    let mut t = v.h(x(l), kb);
                    for r in 0..n {
                        for mm in 0..m {
                            let gam = limit_gamma(jet, r, l, mm);
                            if gam == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                t -= gam * v.e(mm, c) * v.h(v.ei(r + 1, c), kb);
                            }
                        }
                    }
                    nval -= gil * coef * t;
                }
            }
        }
    }
    if convention == IndexConvention::Regrouped {
        nval += bracket_zero_terms(psi, state, jet)?;
        let (cd, cn) = omitted_cross_terms(psi, state, jet)?;
        dval += cd;
        nval += cn;
    }
    Ok((dval, nval))
}

/// The second mixed term of g^{iℓ}𝒟_ℓ𝒟_i, −g^{iℓ}Γ^r_{ℓ𝕞}e^𝕞_𝕔 ∂_{r𝕔}∂_i ψ,
/// which the displayed 𝒟 and 𝒩 carry only once. Returned as the part with
/// (𝕞,𝕔) spatial and the part carrying an index 0 (Γ^0_{ℓ𝕞} is O(1/N) and
/// left out).
pub fn omitted_cross_terms(psi: &dyn TestFunction, state: &FrameState, jet: &MetricJet) -> Result<(f64, f64)> {
    check_frame(psi, state)?;
    let n = jet.n;
    let m = n + 1;
    let w = state.args();
    let g = psi.grad(&w);
    let h = psi.hess(&w);
    let v = BlockView { m, w: &w, g: &g, h: &h, len: w.len() };
    let (mut spatial, mut zero) = (0.0, 0.0);
    for i in 0..n {
        for l in 0..n {
            let gil = jet.g_inv(i, l);
            if gil == 0.0 {
                continue;
            }
            for r in 0..n {
                for mm in 0..m {
                    let gam = limit_gamma(jet, r, l, mm);
                    if gam == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        let t = gil * gam * v.e(mm, c) * v.h(v.ei(r + 1, c), i + 1);
                        if mm > 0 && c > 0 {
                            spatial -= t;
                        } else {
                            zero -= t;
                        }
                    }
                }
            }
        }
    }
    Ok((spatial, zero))
}

/// Terms of g^{iℓ}E^𝕛_𝕓Γ^k_{i𝕛}Γ^r_{ℓ𝕞}E^𝕞_𝕔 ∂_{r𝕔}∂_{k𝕓}ψ with (𝕛,𝕓) spatial
/// but (𝕞,𝕔) not both spatial:
/// g^{iℓ} e^j_b Γ^k_ij [Γ^r_ℓm e^m_0 ∂_{r0} + R^r_ℓ e^0_𝕔 ∂_{r𝕔}] ∂_{kb} ψ.
pub fn bracket_zero_terms(psi: &dyn TestFunction, state: &FrameState, jet: &MetricJet) -> Result<f64> {
    check_frame(psi, state)?;
    let n = jet.n;
    let m = n + 1;
    let w = state.args();
    let g = psi.grad(&w);
    let h = psi.hess(&w);
    let v = BlockView { m, w: &w, g: &g, h: &h, len: w.len() };
    let mut s = 0.0;
    for i in 0..n {
        for l in 0..n {
            let gil = jet.g_inv(i, l);
            if gil == 0.0 {
                continue;
            }
            for j in 0..n {
                for b in 0..n {
                    let ejb = v.e(j + 1, b + 1);
                    for k in 0..n {
                        let gk = jet.gamma(k, i, j);
                        if gk == 0.0 {
                            continue;
                        }
                        let kb = v.ei(k + 1, b + 1);
                        let mut t = 0.0;
                        for r in 0..n {
                            for mm in 0..n {
                                t += jet.gamma(r, l, mm) * v.e(mm + 1, 0) * v.h(v.ei(r + 1, 0), kb);
                            }
                            for c in 0..m {
                                t += jet.ric_mixed(r, l) * v.e(0, c) * v.h(v.ei(r + 1, c), kb);
                            }
                        }
                        s += gil * ejb * gk * t;
                    }
                }
            }
        }
    }
    Ok(s)
}

/// (D_τ + Δ_H) ψ̂ on the Ricci-flow frame bundle, ψ̂ reading `[τ, x, u]`:
/// D_τ = 𝒟_τ and Δ_H = Σ_a H_a H_a with H_a = u^i_a 𝒟_i.
pub fn ricci_flow_frame_operator(psi_hat: &dyn TestFunction, w: &[f64], jet: &MetricJet) -> Result<f64> {
    let n = jet.n;
    match psi_hat.arity() {
        Arity::Frame { d, m } if d == n + 1 && m == n => {}
        a => return Err(LabError::Contract(format!("expected a Ricci-flow frame function, got {a:?}"))),
    }
    let conn = FrameConnection::ricci_flow(jet);
    let fd = frame_derivatives(&conn, w, &psi_hat.grad(w), &psi_hat.hess(w));
    let d = n + 1;
    let u = &w[d..];
    let mut s = fd.first[0];
    for i in 0..n {
        for l in 0..n {
            let mut uu = 0.0;
            for a in 0..n {
                uu += u[i * n + a] * u[l * n + a];
            }
            s += uu * fd.second[(i + 1) * d + l + 1];
        }
    }
    // Σ_a H_a(u^l_a) 𝒟_l with H_a(u^l_a) = −u^i_a Γ^l_ij u^j_a
    for l in 0..n {
        let mut c = 0.0;
        for a in 0..n {
            for i in 0..n {
                for j in 0..n {
                    c -= u[i * n + a] * jet.gamma(l, i, j) * u[j * n + a];
                }
            }
        }
        s += c * fd.first[l + 1];
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// batteries

/// Base test functions of (τ, x) for n = 2, chosen so that every term of the
/// generator defect is exercised.
pub fn scalar_battery() -> Vec<PolyTrig> {
    let a = Arity::Base { d: 3 };
    vec![
        PolyTrig::new(a).term(1.0, vec![pw(0, 3)]).term(-0.5, vec![pw(0, 1), cs(1, 1.0, 0.0)]),
        PolyTrig::new(a).term(1.0, vec![ex(0, -1.0), cs(1, 1.0, 0.3), sn(2, 1.0)]),
        PolyTrig::new(a).term(1.0, vec![pw(0, 1), pw(1, 1), pw(2, 1)]).term(1.0, vec![pw(1, 2)]),
        PolyTrig::new(a).term(1.0, vec![cs(0, 2.0, 0.0)]).term(1.0, vec![cs(0, 2.0, 0.0), pw(2, 1)]),
    ]
}

/// Block-frame test functions for n = 2; several read the e^0 row, the e^·_0
/// column, or mix blocks.
pub fn frame_battery() -> Vec<PolyTrig> {
    let a = Arity::Frame { d: 3, m: 3 };
    let e = |r: usize, c: usize| 3 + 3 * r + c;
    vec![
        PolyTrig::new(a).term(1.0, vec![pw(e(0, 0), 1)]),
        PolyTrig::new(a)
            .term(1.0, vec![pw(e(1, 1), 1), pw(e(2, 2), 1)])
            .term(-1.0, vec![pw(e(1, 2), 1), pw(e(2, 1), 1)]),
        PolyTrig::new(a).term(1.0, vec![pw(0, 1), pw(e(1, 1), 1), cs(1, 1.0, 0.0)]).term(1.0, vec![pw(e(2, 1), 2)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(0, 1), 1), pw(e(1, 0), 1)]).term(1.0, vec![pw(2, 1), pw(e(0, 2), 1)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(0, 0), 2), pw(e(1, 1), 1)]).term(1.0, vec![pw(0, 1), pw(e(2, 0), 1)]),
        PolyTrig::new(a).term(1.0, vec![cs(1, 1.0, 0.2), pw(e(1, 2), 1), pw(e(0, 0), 1)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(1, 0), 1), pw(e(2, 2), 1), pw(e(0, 1), 1)]).term(0.5, vec![pw(e(2, 0), 2)]),
    ]
}

/// Functions of (τ, x) and the spatial block e^j_b only (n = 2).
pub fn spatial_block_battery() -> Vec<PolyTrig> {
    let a = Arity::Frame { d: 3, m: 3 };
    let e = |r: usize, c: usize| 3 + 3 * r + c;
    vec![
        PolyTrig::new(a)
            .term(1.0, vec![pw(e(1, 1), 1), pw(e(2, 2), 1)])
            .term(-1.0, vec![pw(e(1, 2), 1), pw(e(2, 1), 1)]),
        PolyTrig::new(a).term(1.0, vec![pw(0, 1), pw(e(1, 1), 1), cs(1, 1.0, 0.0)]).term(1.0, vec![pw(e(2, 1), 2)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(1, 1), 1), pw(1, 1), pw(2, 1)]).term(1.0, vec![pw(0, 2), pw(e(2, 2), 1)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(1, 2), 1), pw(e(2, 1), 1), cs(2, 1.0, 0.0)]),
        PolyTrig::new(a).term(1.0, vec![pw(e(1, 1), 3)]).term(-0.3, vec![pw(e(2, 1), 1), pw(e(1, 2), 2)]),
    ]
}
