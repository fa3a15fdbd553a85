//! Perelman's metric on M × S^N × I,
//!
//! ```text
//! G = g_τ + τ h + (N/(2τ) + R) dτ²
//! ```
//!
//! with h the round metric of sectional curvature 1/(2N) (radius √(2N)).
//!
//! Block index convention used throughout the crate: index 0 is τ and
//! indices 1..=n are the spatial chart coordinates. Sphere coordinates never
//! enter the large-N code; they appear only through G^{00} and the traces
//! G^{αβ}h_αβ = N/τ and G^{αβ}Γ^0_αβ = −G^{00} N/(2τ).

use crate::backgrounds::{metric_jet, ChartId, ChartPoint, FlowConfig, MetricJet};
use crate::error::{LabError, Result};
use crate::generators::TestFunction;
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PerelmanCoefficients {
    pub n: usize,
    pub big_n: u64,
    pub tau: f64,
    pub g00_inv: f64,
    /// Γ^k_ij over the (n+1)-block at `[k][i][j]`.
    pub block_gamma: Vec<f64>,
    pub sphere_trace_time: f64,
    pub h_trace: f64,
}

impl PerelmanCoefficients {
    pub fn m(&self) -> usize {
        self.n + 1
    }

    #[inline]
    pub fn gamma(&self, k: usize, i: usize, j: usize) -> f64 {
        let m = self.n + 1;
        self.block_gamma[(k * m + i) * m + j]
    }
}

fn dtau_coefficient(jet: &MetricJet, tau: f64, big_n: f64) -> f64 {
    big_n / (2.0 * tau) + jet.scal
}

pub fn perelman_coefficients(jet: &MetricJet, tau: f64, big_n: u64) -> Result<PerelmanCoefficients> {
    let nf = big_n as f64;
    let q = dtau_coefficient(jet, tau, nf);
    if !(q > 0.0) || big_n == 0 {
        return Err(LabError::Config(format!(
            "N = {big_n} leaves N/(2tau) + R = {q} non-positive"
        )));
    }
    let g00 = 1.0 / q;
    let n = jet.n;
    let m = n + 1;
    let mut bg = vec![0.0; m * m * m];
    let idx = |k: usize, i: usize, j: usize| (k * m + i) * m + j;
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                bg[idx(k + 1, i + 1, j + 1)] = jet.gamma(k, i, j);
            }
            bg[idx(k + 1, i + 1, 0)] = jet.ric_mixed(k, i);
            bg[idx(k + 1, 0, i + 1)] = jet.ric_mixed(k, i);
        }
        bg[idx(k + 1, 0, 0)] = -0.5 * jet.grad_scal[k];
    }
    for i in 0..n {
        for j in 0..n {
            bg[idx(0, i + 1, j + 1)] = -g00 * jet.ric(i, j);
        }
        bg[idx(0, i + 1, 0)] = 0.5 * g00 * jet.dscal[i];
        bg[idx(0, 0, i + 1)] = 0.5 * g00 * jet.dscal[i];
    }
    bg[idx(0, 0, 0)] = 0.5 * g00 * (jet.dscal_dtau + jet.scal / tau) - 0.5 / tau;
    Ok(PerelmanCoefficients {
        n,
        big_n,
        tau,
        g00_inv: g00,
        block_gamma: bg,
        sphere_trace_time: -g00 * nf / (2.0 * tau),
        h_trace: nf / tau,
    })
}

/// Block Christoffels together with their exact first derivatives in the
/// block coordinates, `dgamma[l][k][i][j] = ∂_l Γ^k_ij` with l = 0 for τ.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConnectionJet {
    pub coeffs: PerelmanCoefficients,
    pub dgamma: Vec<f64>,
}

pub fn block_connection_jet(jet: &MetricJet, tau: f64, big_n: u64) -> Result<BlockConnectionJet> {
    let coeffs = perelman_coefficients(jet, tau, big_n)?;
    let n = jet.n;
    let m = n + 1;
    let nf = big_n as f64;
    let g00 = coeffs.g00_inv;
    // derivatives of Q = N/(2τ) + R and G00 = 1/Q along block directions
    let mut dq = vec![0.0; m];
    dq[0] = -nf / (2.0 * tau * tau) + jet.dscal_dtau;
    dq[1..].copy_from_slice(&jet.dscal[..n]);
    let dg00: Vec<f64> = dq.iter().map(|d| -g00 * g00 * d).collect();
    // derivatives of R_τ + R/τ
    let a = jet.dscal_dtau + jet.scal / tau;
    let mut da = vec![0.0; m];
    da[0] = jet.d2scal_dtau2 + jet.dscal_dtau / tau - jet.scal / (tau * tau);
    for l in 0..n {
        da[l + 1] = jet.dscal_dtau_dx[l] + jet.dscal[l] / tau;
    }
    let mut d = vec![0.0; m * m * m * m];
    let idx = |l: usize, k: usize, i: usize, j: usize| ((l * m + k) * m + i) * m + j;
    for l in 0..m {
        let sl = l.checked_sub(1);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    d[idx(l, k + 1, i + 1, j + 1)] = match sl {
                        None => jet.dgamma_dtau(k, i, j),
                        Some(s) => jet.dgamma(s, k, i, j),
                    };
                }
                let dr = match sl {
                    None => jet.dric_mixed_dtau(k, i),
                    Some(s) => jet.dric_mixed(s, k, i),
                };
                d[idx(l, k + 1, i + 1, 0)] = dr;
                d[idx(l, k + 1, 0, i + 1)] = dr;
            }
            d[idx(l, k + 1, 0, 0)] = -0.5
                * match sl {
                    None => jet.dgrad_scal_dtau[k],
                    Some(s) => jet.dgrad_scal(s, k),
                };
        }
        for i in 0..n {
            for j in 0..n {
                let dric = match sl {
                    None => jet.dric_dtau(i, j),
                    Some(s) => jet.dric(s, i, j),
                };
                d[idx(l, 0, i + 1, j + 1)] = -dg00[l] * jet.ric(i, j) - g00 * dric;
            }
            let dds = match sl {
                None => jet.dscal_dtau_dx[i],
                Some(s) => jet.hess_scal(s, i),
            };
            let v = 0.5 * dg00[l] * jet.dscal[i] + 0.5 * g00 * dds;
            d[idx(l, 0, i + 1, 0)] = v;
            d[idx(l, 0, 0, i + 1)] = v;
        }
        let extra = if l == 0 { 0.5 / (tau * tau) } else { 0.0 };
        d[idx(l, 0, 0, 0)] = 0.5 * dg00[l] * a + 0.5 * g00 * da[l] + extra;
    }
    Ok(BlockConnectionJet { coeffs, dgamma: d })
}

/// Full metric of M × S^N × I in coordinates `[τ, x¹..xⁿ, y¹..y^N]`, with x
/// in the background's derivative chart and y stereographic on S^N.
#[derive(Debug, Clone)]
pub struct FullChartMetric {
    pub cfg: FlowConfig,
    pub n_small: usize,
    pub base_chart: ChartId,
}

impl FullChartMetric {
    pub fn dim(&self) -> usize {
        1 + self.cfg.n + self.n_small
    }

    pub fn block_dim(&self) -> usize {
        1 + self.cfg.n
    }

    fn base_jet(&self, q: &[f64]) -> Result<MetricJet> {
        let n = self.cfg.n;
        metric_jet(&self.cfg, &ChartPoint::new(q[1..=n].to_vec(), q[0], self.base_chart))
    }

    /// Conformal factor of h at y: h = 2N · 4/(1+|y|²)² δ.
    pub fn sphere_factor(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        2.0 * self.n_small as f64 * 4.0 / ((1.0 + r2) * (1.0 + r2))
    }

    /// Row-major D×D matrix of G at q.
    pub fn metric_eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if q.len() != d {
            return Err(LabError::InvalidPoint(format!("expected {d} coordinates")));
        }
        let n = self.cfg.n;
        let tau = q[0];
        let jet = self.base_jet(q)?;
        let y = &q[1 + n..];
        if y.iter().map(|v| v * v).sum::<f64>() > 1e8 {
            return Err(LabError::Chart("stereographic pole of S^N".into()));
        }
        let mut g = vec![0.0; d * d];
        g[0] = self.n_small as f64 / (2.0 * tau) + jet.scal;
        for i in 0..n {
            for j in 0..n {
                g[(1 + i) * d + 1 + j] = jet.g(i, j);
            }
        }
        let hs = tau * self.sphere_factor(y);
        for a in 0..self.n_small {
            g[(1 + n + a) * d + 1 + n + a] = hs;
        }
        Ok(g)
    }

    /// The tabulated Christoffel symbols of G at q, `[K][I][J]`, zeros
    /// wherever the table lists nothing.
    pub fn table_christoffels(&self, q: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let n = self.cfg.n;
        let m = n + 1;
        let tau = q[0];
        let jet = self.base_jet(q)?;
        let pc = perelman_coefficients(&jet, tau, self.n_small as u64)?;
        let mut out = vec![0.0; d * d * d];
        let idx = |k: usize, i: usize, j: usize| (k * d + i) * d + j;
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    out[idx(k, i, j)] = pc.gamma(k, i, j);
                }
            }
        }
        let y = &q[1 + n..];
        let r2: f64 = y.iter().map(|v| v * v).sum();
        let dphi: Vec<f64> = y.iter().map(|v| -2.0 * v / (1.0 + r2)).collect();
        let hfac = self.sphere_factor(y);
        let s0 = 1 + n;
        for c in 0..self.n_small {
            for a in 0..self.n_small {
                for b in 0..self.n_small {
                    let kd = |u: usize, v: usize| if u == v { 1.0 } else { 0.0 };
                    out[idx(s0 + c, s0 + a, s0 + b)] =
                        kd(c, a) * dphi[b] + kd(c, b) * dphi[a] - kd(a, b) * dphi[c];
                }
                if a == c {
                    out[idx(s0 + c, s0 + a, 0)] = 0.5 / tau;
                    out[idx(s0 + c, 0, s0 + a)] = 0.5 / tau;
                    out[idx(0, s0 + a, s0 + c)] = -0.5 * pc.g00_inv * hfac;
                }
            }
        }
        Ok(out)
    }

    fn inverse(&self, g: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mat = DMatrix::from_row_slice(d, d, g);
        let eig = mat.clone().symmetric_eigen();
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        if !(lo > 0.0) || hi / lo > 1e12 {
            return Err(LabError::Conditioning(format!(
                "metric eigenvalues in [{lo}, {hi}]"
            )));
        }
        mat.try_inverse().ok_or_else(|| LabError::Conditioning("singular metric".into()))
    }

    /// Christoffel symbols by central differences of the metric, `[K][I][J]`.
    pub fn christoffels_fd(&self, q: &[f64], h_fd: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        let g0 = self.metric_eval(q)?;
        let ginv = self.inverse(&g0)?;
        let mut dg = vec![0.0; d * d * d];
        let mut qp = q.to_vec();
        for l in 0..d {
            qp[l] = q[l] + h_fd;
            let gp = self.metric_eval(&qp)?;
            qp[l] = q[l] - h_fd;
            let gm = self.metric_eval(&qp)?;
            qp[l] = q[l];
            for ij in 0..d * d {
                dg[l * d * d + ij] = (gp[ij] - gm[ij]) / (2.0 * h_fd);
            }
        }
        let dgm = |l: usize, i: usize, j: usize| dg[(l * d + i) * d + j];
        let mut out = vec![0.0; d * d * d];
        for k in 0..d {
            for i in 0..d {
                for j in i..d {
                    let mut s = 0.0;
                    for mm in 0..d {
                        let gi = ginv[(k, mm)];
                        if gi != 0.0 {
                            s += gi * (dgm(i, mm, j) + dgm(j, mm, i) - dgm(mm, i, j));
                        }
                    }
                    out[(k * d + i) * d + j] = 0.5 * s;
                    out[(k * d + j) * d + i] = 0.5 * s;
                }
            }
        }
        Ok(out)
    }

    /// Gram–Schmidt G-orthonormalisation of the coordinate basis; columns of
    /// the returned row-major matrix are the frame vectors.
    pub fn orthonormal_coordinate_frame(&self, q: &[f64]) -> Result<Vec<f64>> {
        let g = self.metric_eval(q)?;
        gram_schmidt(&g, self.dim())
    }
}

pub fn full_chart_metric(cfg: &FlowConfig, n_small: usize) -> Result<FullChartMetric> {
    if !(2..=8).contains(&n_small) {
        return Err(LabError::Config("full-chart validator supports 2 <= N_small <= 8".into()));
    }
    let base_chart = match cfg.background.family().stepping_chart() {
        ChartId::Ambient => ChartId::North,
        c => c,
    };
    Ok(FullChartMetric { cfg: cfg.clone(), n_small, base_chart })
}

/// Columns orthonormal with respect to the symmetric positive matrix `g`
/// (row-major d×d), starting from the standard basis.
pub fn gram_schmidt(g: &[f64], d: usize) -> Result<Vec<f64>> {
    gram_schmidt_from(g, d, &identity(d))
}

/// Gram–Schmidt of the columns of `start` with respect to `g`.
pub fn gram_schmidt_from(g: &[f64], d: usize, start: &[f64]) -> Result<Vec<f64>> {
    let ip = |u: &[f64], v: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += u[i] * g[i * d + j] * v[j];
            }
        }
        s
    };
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for a in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| start[i * d + a]).collect();
        for _ in 0..2 {
            for u in &cols {
                let c = ip(&v, u);
                for i in 0..d {
                    v[i] -= c * u[i];
                }
            }
        }
        let nrm = ip(&v, &v);
        if !(nrm > 1e-24) {
            return Err(LabError::Conditioning("degenerate Gram-Schmidt column".into()));
        }
        let s = nrm.sqrt();
        cols.push(v.iter().map(|x| x / s).collect());
    }
    let mut out = vec![0.0; d * d];
    for (a, c) in cols.iter().enumerate() {
        for i in 0..d {
            out[i * d + a] = c[i];
        }
    }
    Ok(out)
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureFd {
    pub dim: usize,
    pub christoffels: Vec<f64>,
    pub ricci: Vec<f64>,
    pub sup_ric_frame: f64,
}

/// Christoffels and Ricci tensor of G by central differences. The Ricci
/// tensor differentiates finite-difference Christoffels with an outer step
/// of `10·h_fd`.
pub fn curvature_fd(fcm: &FullChartMetric, q: &[f64], h_fd: f64) -> Result<CurvatureFd> {
    let d = fcm.dim();
    let gam = fcm.christoffels_fd(q, h_fd)?;
    let h2 = 10.0 * h_fd;
    let mut dgam = vec![0.0; d * d * d * d];
    let mut qp = q.to_vec();
    for l in 0..d {
        qp[l] = q[l] + h2;
        let gp = fcm.christoffels_fd(&qp, h_fd)?;
        qp[l] = q[l] - h2;
        let gm = fcm.christoffels_fd(&qp, h_fd)?;
        qp[l] = q[l];
        for kij in 0..d * d * d {
            dgam[l * d * d * d + kij] = (gp[kij] - gm[kij]) / (2.0 * h2);
        }
    }
    let g = |k: usize, i: usize, j: usize| gam[(k * d + i) * d + j];
    let dg = |l: usize, k: usize, i: usize, j: usize| dgam[((l * d + k) * d + i) * d + j];
    let mut ric = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += dg(k, k, i, j) - dg(j, k, i, k);
                for l in 0..d {
                    s += g(k, k, l) * g(l, i, j) - g(k, j, l) * g(l, i, k);
                }
            }
            ric[i * d + j] = s;
        }
    }
    let frame = fcm.orthonormal_coordinate_frame(q)?;
    let mut sup: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += frame[i * d + a] * ric[i * d + j] * frame[j * d + b];
                }
            }
            sup = sup.max(s.abs());
        }
    }
    Ok(CurvatureFd { dim: d, christoffels: gam, ricci: ric, sup_ric_frame: sup })
}

/// Full orthonormal frame of G at q whose block columns are `e_block` (which
/// must be orthonormal for diag(G_00, g)) and whose sphere columns are
/// (τ h)^{-1/2} times the coordinate basis. Row-major D×D.
pub fn orthonormal_lift(fcm: &FullChartMetric, q: &[f64], e_block: &[f64]) -> Vec<f64> {
    let d = fcm.dim();
    let m = fcm.block_dim();
    let mut e = vec![0.0; d * d];
    for r in 0..m {
        for c in 0..m {
            e[r * d + c] = e_block[r * m + c];
        }
    }
    let y = &q[m..];
    let s = 1.0 / (q[0] * fcm.sphere_factor(y)).sqrt();
    for a in m..d {
        e[a * d + a] = s;
    }
    e
}

/// Σ_A H_A H_A Ψ at (q, E) for Ψ the pullback of a block function ψ.
///
/// H_A is applied in the full chart, with the horizontal fields
/// H_A = E^I_A ∂_I − Γ^K_IJ E^I_A E^J_B ∂/∂E^K_B built from finite-difference
/// Christoffels; the outer derivative along H_A is a five-point stencil of
/// width `eps`. The frame must satisfy Σ_A E^I_A E^J_A = G^{IJ}.
pub fn horizontal_laplacian_fd(
    fcm: &FullChartMetric,
    q: &[f64],
    frame: &[f64],
    psi: &dyn TestFunction,
    h_fd: f64,
    eps: f64,
) -> Result<f64> {
    let d = fcm.dim();
    let m = fcm.block_dim();
    if psi.len() != m + m * m {
        return Err(LabError::Contract("psi must read the (n+1)-block".into()));
    }
    let g = fcm.metric_eval(q)?;
    let ginv = fcm.inverse(&g)?;
    let mut defect: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for a in 0..d {
                s += frame[i * d + a] * frame[j * d + a];
            }
            defect = defect.max((s - ginv[(i, j)]).abs() / ginv[(i, j)].abs().max(1.0));
        }
    }
    if defect > 1e-8 {
        return Err(LabError::Contract(format!(
            "frame is not G-orthonormal (defect {defect:e})"
        )));
    }

    let block_args = |qq: &[f64], ee: &[f64]| -> Vec<f64> {
        let mut w = Vec::with_capacity(m + m * m);
        w.extend_from_slice(&qq[..m]);
        for r in 0..m {
            for c in 0..m {
                w.push(ee[r * d + c]);
            }
        }
        w
    };
    // Value of H_A Ψ and the field H_A itself at (qq, ee).
    let h_apply = |a: usize, qq: &[f64], ee: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let gam = fcm.christoffels_fd(qq, h_fd)?;
        let mut vq = vec![0.0; d];
        for i in 0..d {
            vq[i] = ee[i * d + a];
        }
        let mut ve = vec![0.0; d * d];
        for k in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for i in 0..d {
                    let ea = ee[i * d + a];
                    if ea == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        s += gam[(k * d + i) * d + j] * ea * ee[j * d + b];
                    }
                }
                ve[k * d + b] = -s;
            }
        }
        let grad = psi.grad(&block_args(qq, ee));
        let mut val = 0.0;
        for i in 0..m {
            val += vq[i] * grad[i];
        }
        for r in 0..m {
            for c in 0..m {
                val += ve[r * d + c] * grad[m + r * m + c];
            }
        }
        Ok((val, vq, ve))
    };

    let mut total = 0.0;
    for a in 0..d {
        let (_, vq, ve) = h_apply(a, q, frame)?;
        let shifted = |t: f64| -> Result<f64> {
            let qq: Vec<f64> = q.iter().zip(&vq).map(|(x, v)| x + t * v).collect();
            let ee: Vec<f64> = frame.iter().zip(&ve).map(|(x, v)| x + t * v).collect();
            Ok(h_apply(a, &qq, &ee)?.0)
        };
        let f2p = shifted(2.0 * eps)?;
        let f1p = shifted(eps)?;
        let f1m = shifted(-eps)?;
        let f2m = shifted(-2.0 * eps)?;
        total += (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * eps);
    }
    Ok(total)
}
