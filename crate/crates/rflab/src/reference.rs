//! Limit objects: parabolic Brownian motion on the Ricci-flow space-time,
//! its stochastic parallel transport, and heat-flow expectations.

use crate::backgrounds::{ambient_to_stereo, metric_jet, BackgroundKind, ChartId, ChartPoint, FlowConfig};
use crate::error::{LabError, Result};
use crate::generators::FrameState;
use crate::rng::RngSpec;
use crate::sde::{
    estimate, simulate_base_observe, simulate_base_paths, transport_frame_along_path, Estimate, ParabolicModel,
    PathEnsemble, PathView, SimSpec,
};
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

/// A parabolic path with its transported frames. The clock is
/// t = 𝒯 − τ and decreases with unit speed.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    pub times: Vec<f64>,
    pub clock: Vec<f64>,
    pub frames: Vec<FrameState>,
    pub singular: bool,
}

impl ReferencePath {
    /// ‖uᵀ g_t u − I‖_F at saved index k.
    pub fn orthonormality_defect(&self, cfg: &FlowConfig, k: usize) -> Result<f64> {
        let f = &self.frames[k];
        orthonormality_defect(cfg, &f.base, &f.e)
    }

    /// Replace every saved frame by its polar factor u (uᵀ g u)^{-1/2}.
    /// Off by default: the defect is a measured quantity, and this hides it.
    pub fn reorthonormalize(&mut self, cfg: &FlowConfig) -> Result<()> {
        for f in &mut self.frames {
            f.e = polar_reorthonormalize(cfg, &f.base, &f.e)?;
            f.det = crate::generators::determinant(&f.e, cfg.n);
        }
        Ok(())
    }
}

/// Nearest g-orthonormal frame to u in the polar sense: u (uᵀ g u)^{-1/2}.
pub fn polar_reorthonormalize(cfg: &FlowConfig, p: &ChartPoint, u: &[f64]) -> Result<Vec<f64>> {
    let n = cfg.n;
    let jet = metric_jet(cfg, p)?;
    let um = DMatrix::from_row_slice(n, n, u);
    let g = DMatrix::from_fn(n, n, |i, j| jet.g(i, j));
    let gram = um.transpose() * &g * &um;
    let eig = SymmetricEigen::new(gram);
    if eig.eigenvalues.iter().any(|l| !(*l > 1e-14)) {
        return Err(LabError::Conditioning("frame is singular, no polar factor".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let out = um * r;
    Ok((0..n * n).map(|k| out[(k / n, k % n)]).collect())
}

/// ‖uᵀ g u − I‖_F with g = g_τ at `p` and u an n×n frame in p's chart.
pub fn orthonormality_defect(cfg: &FlowConfig, p: &ChartPoint, u: &[f64]) -> Result<f64> {
    let n = cfg.n;
    let jet = metric_jet(cfg, p)?;
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut v = 0.0;
            for i in 0..n {
                for j in 0..n {
                    v += u[i * n + a] * jet.g(i, j) * u[j * n + b];
                }
            }
            if a == b {
                v -= 1.0;
            }
            s += v * v;
        }
    }
    Ok(s.sqrt())
}

fn check_horizon(cfg: &FlowConfig, start: &ChartPoint, horizon: f64) -> Result<()> {
    if start.tau + horizon > cfg.t_final + 1e-12 {
        return Err(LabError::Domain(format!(
            "horizon {horizon} runs past T from tau = {}",
            start.tau
        )));
    }
    Ok(())
}

/// Parabolic base paths from `start`: x by Δ_{g_τ}, τ = τ0 + s.
pub fn parabolic_base_paths(
    cfg: &FlowConfig,
    start: &ChartPoint,
    spec: &SimSpec,
    rng: &RngSpec,
) -> Result<PathEnsemble> {
    check_horizon(cfg, start, spec.horizon)?;
    simulate_base_paths(&ParabolicModel::new(cfg), start, spec, rng)
}

/// Transport `u0` (an n×n frame at the path's start, in `u0.base.chart`)
/// along a full-resolution parabolic base path.
pub fn parabolic_transport(
    cfg: &FlowConfig,
    path: &PathView,
    save_every: usize,
    u0: &FrameState,
) -> Result<ReferencePath> {
    let frames = transport_frame_along_path(&ParabolicModel::new(cfg), path, u0)?;
    let calt = cfg.calt();
    let mut out = ReferencePath { times: vec![], clock: vec![], frames: vec![], singular: false };
    for (k, f) in frames.into_iter().enumerate() {
        if k % save_every.max(1) != 0 {
            continue;
        }
        out.singular |= f.det.abs() < 1e-8;
        out.times.push(path.time(k));
        out.clock.push(calt - f.base.tau);
        out.frames.push(f);
    }
    Ok(out)
}

/// Base functions with a closed-form heat flow.
#[derive(Debug, Clone, PartialEq)]
pub enum HeatTarget {
    Constant(f64),
    /// amp · cos(k·x + phase) on the torus.
    TorusMode { amp: f64, k: Vec<f64>, phase: f64 },
    /// amp · y_axis, an ambient coordinate of the sphere.
    SphereCoordinate { amp: f64, axis: usize },
}

impl HeatTarget {
    /// Value at a state in the stepping representation of `cfg`.
    pub fn eval_stepping(&self, coords: &[f64]) -> f64 {
        match self {
            HeatTarget::Constant(c) => *c,
            HeatTarget::TorusMode { amp, k, phase } => {
                amp * (k.iter().zip(coords).map(|(a, b)| a * b).sum::<f64>() + phase).cos()
            }
            HeatTarget::SphereCoordinate { amp, axis } => amp * coords[*axis],
        }
    }

    fn supported(&self, cfg: &FlowConfig) -> Result<()> {
        match (self, &cfg.background) {
            (HeatTarget::Constant(_), _) => Ok(()),
            (HeatTarget::TorusMode { k, .. }, BackgroundKind::FlatTorus(_)) if k.len() == cfg.n => Ok(()),
            (HeatTarget::SphereCoordinate { axis, .. }, BackgroundKind::ShrinkingSphere(_)) if *axis <= cfg.n => {
                Ok(())
            }
            _ => Err(LabError::Unsupported(format!(
                "no heat flow for {self:?} on {}",
                cfg.background.family().label()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeatMethod {
    MonteCarlo { n_paths: usize, step: f64, seed: u64 },
    ClosedForm,
}

/// Multiplier of the heat flow of a sphere coordinate harmonic from τ0 to
/// τ1: exp(−∫ n/c(τ) dτ) = (c(τ0)/c(τ1))^{n/(2(n−1))}.
pub fn sphere_harmonic_decay(cfg: &FlowConfig, tau0: f64, tau1: f64) -> Result<f64> {
    let s = cfg.sphere().ok_or_else(|| LabError::Unsupported("not a sphere".into()))?;
    let n = cfg.n as f64;
    let c0 = s.scale(cfg.n, cfg.calt(), tau0);
    let c1 = s.scale(cfg.n, cfg.calt(), tau1);
    Ok((c0 / c1).powf(n / (2.0 * (n - 1.0))))
}

/// E[f(X_d)] for parabolic X started at `start` with duration d; in the
/// clock t = 𝒯 − τ this is H f evaluated over [t_0 − d, t_0].
pub fn heat_expectation(
    cfg: &FlowConfig,
    target: &HeatTarget,
    start: &ChartPoint,
    duration: f64,
    method: HeatMethod,
) -> Result<Estimate> {
    check_horizon(cfg, start, duration)?;
    match method {
        HeatMethod::ClosedForm => {
            target.supported(cfg)?;
            let value = match target {
                HeatTarget::Constant(c) => *c,
                HeatTarget::TorusMode { k, .. } => {
                    let k2: f64 = k.iter().map(|v| v * v).sum();
                    (-k2 * duration).exp() * target.eval_stepping(&start.coords)
                }
                HeatTarget::SphereCoordinate { .. } => {
                    let y = crate::backgrounds::chart_map(cfg, start, ChartId::Ambient)?;
                    sphere_harmonic_decay(cfg, start.tau, start.tau + duration)? * target.eval_stepping(&y.coords)
                }
            };
            Ok(Estimate { mean: value, stderr: 0.0, n: 0 })
        }
        HeatMethod::MonteCarlo { n_paths, step, seed } => {
            let spec = SimSpec::new(duration, step, n_paths).final_only();
            let rows = simulate_base_observe(
                &ParabolicModel::new(cfg),
                start,
                &spec,
                &RngSpec::new(seed),
                |p| vec![target.eval_stepping(p.last().coords)],
            )?;
            let vals: Vec<f64> = rows.into_iter().map(|r| r[0]).collect();
            estimate(&vals)
        }
    }
}

/// E|sin(x + Z)| for Z ~ N(0, 2d): 2/π − (4/π) Σ_k cos(2kx) e^{−4k²d}/(4k²−1).
pub fn expected_abs_sin(x: f64, d: f64) -> f64 {
    let mut s = 2.0 / PI;
    for k in 1..10_000 {
        let kf = k as f64;
        let w = (-4.0 * kf * kf * d).exp();
        let t = (4.0 / PI) * (2.0 * kf * x).cos() * w / (4.0 * kf * kf - 1.0);
        s -= t;
        if w / (4.0 * kf * kf) < 1e-18 {
            break;
        }
    }
    s
}

/// Chart coordinates of a stored base state, in `chart` for the sphere.
pub fn chart_coords_of(cfg: &FlowConfig, coords: &[f64], chart: ChartId) -> Result<Vec<f64>> {
    if cfg.is_sphere() {
        ambient_to_stereo(coords, chart)
    } else {
        Ok(coords.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perelman::identity;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_heat_flow() {
        let cfg = FlowConfig::torus_default();
        let p = ChartPoint::new(vec![0.1, 0.2], 0.1, ChartId::Periodic);
        let e = heat_expectation(&cfg, &HeatTarget::Constant(3.5), &p, 0.3, HeatMethod::ClosedForm).unwrap();
        assert_eq!(e.mean, 3.5);
        let mc = heat_expectation(
            &cfg,
            &HeatTarget::Constant(3.5),
            &p,
            0.3,
            HeatMethod::MonteCarlo { n_paths: 10, step: 0.01, seed: 1 },
        )
        .unwrap();
        assert_eq!(mc.mean, 3.5);
    }

    #[test]
    fn torus_fourier_mode() {
        let cfg = FlowConfig::torus_default();
        let p = ChartPoint::new(vec![0.4, 0.0], 0.1, ChartId::Periodic);
        let t = HeatTarget::TorusMode { amp: 1.0, k: vec![1.0, 0.0], phase: 0.0 };
        let e = heat_expectation(&cfg, &t, &p, 0.5, HeatMethod::ClosedForm).unwrap();
        assert_abs_diff_eq!(e.mean, (-0.5f64).exp() * 0.4f64.cos(), epsilon = 1e-15);
    }

    #[test]
    fn unsupported_closed_form() {
        let cfg = FlowConfig::torus_default();
        let p = ChartPoint::new(vec![0.4, 0.0], 0.1, ChartId::Periodic);
        let t = HeatTarget::SphereCoordinate { amp: 1.0, axis: 0 };
        assert!(matches!(
            heat_expectation(&cfg, &t, &p, 0.5, HeatMethod::ClosedForm),
            Err(LabError::Unsupported(_))
        ));
    }

    #[test]
    fn sphere_decay_matches_unit_sphere_form() {
        // c(t) = 1 − 2t in forward time: exp(−∫ 2/c) over [t1, t0] equals c(t0)/c(t1)
        let cfg = FlowConfig::sphere_default();
        let tau0 = 0.05;
        let tau1 = 0.25;
        let t0 = cfg.calt() - tau0;
        let t1 = cfg.calt() - tau1;
        let want = (1.0 - 2.0 * t0) / (1.0 - 2.0 * t1);
        assert_abs_diff_eq!(sphere_harmonic_decay(&cfg, tau0, tau1).unwrap(), want, epsilon = 1e-14);
    }

    #[test]
    fn abs_sin_series() {
        // d = 0 limit is |sin x|; large d tends to 2/π
        assert_abs_diff_eq!(expected_abs_sin(0.7, 1e-6), 0.7f64.sin(), epsilon = 2e-3);
        assert_abs_diff_eq!(expected_abs_sin(0.7, 20.0), 2.0 / PI, epsilon = 1e-12);
    }

    #[test]
    fn torus_transport_is_constant() {
        let cfg = FlowConfig::torus_default();
        let p = ChartPoint::new(vec![0.1, 0.2], 0.1, ChartId::Periodic);
        let ens = parabolic_base_paths(&cfg, &p, &SimSpec::new(0.1, 0.01, 3), &RngSpec::new(4)).unwrap();
        let u0 = FrameState::spatial(p, identity(2)).unwrap();
        let r = parabolic_transport(&cfg, &ens.path(1), 1, &u0).unwrap();
        assert_eq!(r.frames.last().unwrap().e, identity(2));
        assert_abs_diff_eq!(r.clock[10], cfg.calt() - 0.2, epsilon = 1e-15);
    }

    #[test]
    fn polar_factor_is_orthonormal_and_fixes_orthonormal_frames() {
        let cfg = FlowConfig::sphere_default();
        let p = ChartPoint::new(vec![0.3, -0.2], 0.1, ChartId::North);
        let u = vec![1.3, 0.2, -0.1, 0.8];
        let v = polar_reorthonormalize(&cfg, &p, &u).unwrap();
        assert!(orthonormality_defect(&cfg, &p, &v).unwrap() < 1e-13);
        let w = polar_reorthonormalize(&cfg, &p, &v).unwrap();
        for (a, b) in v.iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
        assert!(polar_reorthonormalize(&cfg, &p, &[1.0, 2.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn horizon_past_t_rejected() {
        let cfg = FlowConfig::torus_default();
        let p = ChartPoint::new(vec![0.1, 0.2], 0.9, ChartId::Periodic);
        assert!(parabolic_base_paths(&cfg, &p, &SimSpec::new(0.5, 0.01, 3), &RngSpec::new(4)).is_err());
    }
}
