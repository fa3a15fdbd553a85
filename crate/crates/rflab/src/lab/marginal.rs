//! Time marginals of the projected process and martingale residuals.

use super::{loglog_slope, ExperimentReport, McParams};
use crate::backgrounds::{chart_map, BackgroundKind, ChartId, ChartPoint, FlowConfig};
use crate::error::{LabError, Result};
use crate::rng::RngSpec;
use crate::sde::{
    column, estimate, simulate_base_observe, variance_estimate, DiffusionModel, PathView, PerelmanModel, SimSpec,
    StepCoeffs,
};

fn check_window(cfg: &FlowConfig, start: &ChartPoint, horizon: f64) -> Result<()> {
    cfg.check_tau(start.tau)?;
    if start.tau + horizon > cfg.t_final {
        return Err(LabError::Domain(format!("s = {horizon} runs past T from tau = {}", start.tau)));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MarginalParams {
    pub s_list: Vec<f64>,
    pub n_grid: Vec<u64>,
    pub mc: McParams,
}

/// E[t_s] and Var[t_s] of the projected process per N, with t = 𝒯 − τ.
/// The torus has exact oracles for both; elsewhere the mean is held to
/// 0.01·s + 3 stderr at the largest N and the variance to a 1/N trend.
pub fn time_marginal_experiment(cfg: &FlowConfig, start: &ChartPoint, p: &MarginalParams) -> Result<ExperimentReport> {
    let horizon = p.s_list.iter().cloned().fold(0.0, f64::max);
    check_window(cfg, start, horizon)?;
    let mut rep = ExperimentReport::new("scalar-convergence", cfg);
    rep.n_grid = p.n_grid.clone();
    let calt = cfg.calt();
    let t0 = calt - start.tau;
    let torus = matches!(cfg.background, BackgroundKind::FlatTorus(_));
    let spec = SimSpec::new(horizon, p.mc.step, p.mc.n_paths);
    let idx: Vec<usize> = p.s_list.iter().map(|&s| spec.saved_index(s)).collect();
    let rng = RngSpec::new(p.mc.seed);
    let mut vars = vec![vec![0.0; p.n_grid.len()]; p.s_list.len()];
    let mut var_se = vec![vec![0.0; p.n_grid.len()]; p.s_list.len()];
    let n_max = p.n_grid.iter().copied().max().unwrap_or(0);

    for (ni, &big_n) in p.n_grid.iter().enumerate() {
        let model = PerelmanModel::new(cfg, big_n);
        let rows = simulate_base_observe(&model, start, &spec, &rng, |pv: &PathView| {
            let mut v: Vec<f64> = idx.iter().map(|&k| calt - pv.state(k).tau).collect();
            v.push(if pv.stopped_at.is_some() { 1.0 } else { 0.0 });
            v
        })?;
        let stopped = column(&rows, p.s_list.len()).iter().sum::<f64>();
        if stopped > 0.0 {
            rep.notes.push(format!("N = {big_n}: {stopped} paths absorbed at the tau boundary"));
        }
        let nf = big_n as f64;
        for (si, &s) in p.s_list.iter().enumerate() {
            let ts = column(&rows, si);
            let m = estimate(&ts)?;
            let v = variance_estimate(&ts)?;
            vars[si][ni] = v.mean;
            var_se[si][ni] = v.stderr;
            let mc = |b: super::RowBuilder| b.n(big_n).s(s).mc(p.mc.n_paths, p.mc.step);
            if torus {
                let mean_o = t0 - (1.0 + 1.0 / nf) * s;
                let var_o = 4.0 / nf * (start.tau * s + (1.0 + 1.0 / nf) * s * s / 2.0);
                let ok_m = (m.mean - mean_o).abs() <= 3.0 * m.stderr;
                let ok_v = (v.mean - var_o).abs() <= 3.0 * v.stderr;
                mc(rep.row("t_mean")).est(m.mean, Some(m.stderr)).oracle(mean_o).pass(ok_m).push(&mut rep);
                mc(rep.row("t_var")).est(v.mean, Some(v.stderr)).oracle(var_o).pass(ok_v).push(&mut rep);
                rep.push_check(
                    &format!("t_mean_N{big_n}_s{s}"),
                    ok_m,
                    (m.mean - mean_o).abs() / m.stderr,
                    "|est - oracle| <= 3 stderr",
                    format!("oracle {mean_o}"),
                );
                rep.push_check(
                    &format!("t_var_N{big_n}_s{s}"),
                    ok_v,
                    (v.mean - var_o).abs() / v.stderr,
                    "|est - oracle| <= 3 stderr",
                    format!("oracle {var_o}"),
                );
            } else {
                let target = t0 - s;
                let ok = (m.mean - target).abs() <= 0.01 * s + 3.0 * m.stderr;
                let at_max = big_n == n_max;
                let mut row = mc(rep.row("t_mean")).est(m.mean, Some(m.stderr)).oracle(target);
                if at_max {
                    row = row.pass(ok);
                    rep.push_check(
                        &format!("t_mean_N{big_n}_s{s}"),
                        ok,
                        (m.mean - target).abs(),
                        "<= 0.01 s + 3 stderr",
                        format!("stderr {}", m.stderr),
                    );
                }
                row.push(&mut rep);
                mc(rep.row("t_var")).est(v.mean, Some(v.stderr)).push(&mut rep);
            }
        }
    }

    if p.n_grid.len() >= 3 {
        let xs: Vec<f64> = p.n_grid.iter().map(|&n| n as f64).collect();
        for (si, &s) in p.s_list.iter().enumerate() {
            let fit = loglog_slope(&format!("t_var_s{s}"), &xs, &vars[si])?;
            let ok = (-1.3..=-0.7).contains(&fit.slope);
            rep.push_check(&format!("t_var_slope_s{s}"), ok, fit.slope, "in [-1.3, -0.7]", format!("{:?}", vars[si]));
            rep.slopes.push(fit);
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// martingale residuals

/// Time factor φ(τ) of a product test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeFactor {
    Pow(i32),
    Exp(f64),
}

impl TimeFactor {
    fn jet(&self, tau: f64) -> [f64; 3] {
        match *self {
            TimeFactor::Pow(p) => {
                let pf = p as f64;
                [tau.powi(p), pf * tau.powi(p - 1), pf * (pf - 1.0) * tau.powi(p - 2)]
            }
            TimeFactor::Exp(r) => {
                let e = (r * tau).exp();
                [e, r * e, r * r * e]
            }
        }
    }
}

/// Space factor: an eigenfunction of Δ_{g_τ} on the background.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceFactor {
    One,
    /// cos(k·x) on the torus, Δ = −|k|².
    TorusMode(Vec<f64>),
    /// An ambient coordinate of the sphere, Δ = −n/c(τ).
    SphereCoordinate(usize),
}

/// f(τ, x) = φ(τ) ψ(x) with ψ a Laplace eigenfunction, so that both the
/// projected generator and the heat operator have closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductFunction {
    pub time: TimeFactor,
    pub space: SpaceFactor,
}

impl ProductFunction {
    pub fn new(time: TimeFactor, space: SpaceFactor) -> Self {
        Self { time, space }
    }

    pub fn label(&self) -> String {
        let t = match self.time {
            TimeFactor::Pow(p) => format!("tau^{p}"),
            TimeFactor::Exp(r) => format!("exp({r}tau)"),
        };
        match &self.space {
            SpaceFactor::One => t,
            SpaceFactor::TorusMode(k) => format!("{t}*cos({k:?}.x)"),
            SpaceFactor::SphereCoordinate(a) => format!("{t}*y{}", a + 1),
        }
    }

    fn space_value(&self, coords: &[f64]) -> f64 {
        match &self.space {
            SpaceFactor::One => 1.0,
            SpaceFactor::TorusMode(k) => k.iter().zip(coords).map(|(a, b)| a * b).sum::<f64>().cos(),
            SpaceFactor::SphereCoordinate(a) => coords[*a],
        }
    }

    fn eigenvalue(&self, cfg: &FlowConfig, tau: f64) -> Result<f64> {
        Ok(match &self.space {
            SpaceFactor::One => 0.0,
            SpaceFactor::TorusMode(k) => -k.iter().map(|v| v * v).sum::<f64>(),
            SpaceFactor::SphereCoordinate(_) => {
                let s = cfg.sphere().ok_or_else(|| LabError::Unsupported("not a sphere".into()))?;
                -(cfg.n as f64) / s.scale(cfg.n, cfg.calt(), tau)
            }
        })
    }

    fn supported(&self, cfg: &FlowConfig) -> Result<()> {
        match (&self.space, &cfg.background) {
            (SpaceFactor::One, _) => Ok(()),
            (SpaceFactor::TorusMode(k), BackgroundKind::FlatTorus(_)) if k.len() == cfg.n => Ok(()),
            (SpaceFactor::SphereCoordinate(a), BackgroundKind::ShrinkingSphere(_)) if *a <= cfg.n => Ok(()),
            _ => Err(LabError::Unsupported(format!("{} on {}", self.label(), cfg.background.label()))),
        }
    }

    /// f at a stepping state.
    pub fn eval(&self, tau: f64, coords: &[f64]) -> f64 {
        self.time.jet(tau)[0] * self.space_value(coords)
    }

    /// (∂_τ + Δ_{g_τ}) f.
    pub fn heat(&self, cfg: &FlowConfig, tau: f64, coords: &[f64]) -> Result<f64> {
        let [phi, d1, _] = self.time.jet(tau);
        Ok((d1 + phi * self.eigenvalue(cfg, tau)?) * self.space_value(coords))
    }

    /// Projected generator applied to f, given the τ drift and τ diffusion
    /// coefficient a^{ττ} = G^{ττ}.
    pub fn generator(&self, cfg: &FlowConfig, tau: f64, coords: &[f64], b0: f64, a00: f64) -> Result<f64> {
        let [phi, d1, d2] = self.time.jet(tau);
        Ok((b0 * d1 + a00 * d2 + phi * self.eigenvalue(cfg, tau)?) * self.space_value(coords))
    }
}

/// Default martingale battery for a background, weighted toward functions
/// of τ where the generator defect is visible.
pub fn martingale_battery(cfg: &FlowConfig) -> Vec<ProductFunction> {
    use SpaceFactor::*;
    use TimeFactor::*;
    let n = cfg.n;
    match cfg.background {
        BackgroundKind::FlatTorus(_) => {
            let mut k1 = vec![0.0; n];
            k1[0] = 1.0;
            vec![
                ProductFunction::new(Pow(1), One),
                ProductFunction::new(Exp(5.0), One),
                ProductFunction::new(Pow(3), One),
                ProductFunction::new(Exp(8.0), TorusMode(k1.clone())),
                ProductFunction::new(Pow(2), TorusMode(vec![1.0; n])),
            ]
        }
        BackgroundKind::ShrinkingSphere(_) => vec![
            ProductFunction::new(Pow(1), One),
            ProductFunction::new(Exp(5.0), One),
            ProductFunction::new(Pow(3), One),
            ProductFunction::new(Exp(8.0), SphereCoordinate(n)),
            ProductFunction::new(Pow(2), SphereCoordinate(0)),
        ],
    }
}

/// Conditioning events measurable at time a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowEvent {
    All,
    /// First spatial coordinate positive: sin(x¹_a) > 0 on the torus, y¹_a > 0
    /// on the sphere.
    FirstCoordinatePositive,
    /// τ_a ahead of the deterministic clock.
    ClockAhead,
}

impl WindowEvent {
    pub const ALL: [WindowEvent; 3] = [WindowEvent::All, WindowEvent::FirstCoordinatePositive, WindowEvent::ClockAhead];

    pub fn label(&self) -> &'static str {
        match self {
            WindowEvent::All => "all",
            WindowEvent::FirstCoordinatePositive => "x1_positive",
            WindowEvent::ClockAhead => "clock_ahead",
        }
    }

    fn holds(&self, torus: bool, tau0: f64, a: f64, tau: f64, coords: &[f64]) -> bool {
        match self {
            WindowEvent::All => true,
            WindowEvent::FirstCoordinatePositive => {
                if torus {
                    coords[0].sin() > 0.0
                } else {
                    coords[0] > 0.0
                }
            }
            WindowEvent::ClockAhead => tau > tau0 + a,
        }
    }
}

/// Which operator compensates f in Z^f.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compensator {
    /// The projected generator of the simulated process.
    Generator,
    /// The heat operator ∂_τ + Δ, i.e. the generator with ℰ_N omitted.
    Heat,
}

#[derive(Debug, Clone)]
pub struct MartingaleParams {
    pub battery: Vec<ProductFunction>,
    pub windows: Vec<(f64, f64)>,
    pub n_grid: Vec<u64>,
    pub mc: McParams,
    /// N and path count of the omitted-ℰ_N control.
    pub control_n: u64,
    pub control_paths: usize,
}

impl MartingaleParams {
    pub fn defaults(cfg: &FlowConfig, mc: McParams) -> Self {
        Self {
            battery: martingale_battery(cfg),
            windows: vec![(0.0, 0.1), (0.1, 0.2), (0.05, 0.2)],
            n_grid: vec![10_000],
            mc,
            control_n: 100,
            control_paths: mc.n_paths,
        }
    }
}

/// Standardized residuals E[(Z_b − Z_a) χ_L] / stderr for every battery case.
#[derive(Debug, Clone)]
pub struct MartingaleCases {
    pub labels: Vec<String>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub skipped: Vec<String>,
}

impl MartingaleCases {
    pub fn standardized(&self) -> Vec<f64> {
        self.means.iter().zip(&self.stderrs).map(|(m, s)| m / s).collect()
    }
}

fn martingale_cases(
    cfg: &FlowConfig,
    start: &ChartPoint,
    p: &MartingaleParams,
    big_n: u64,
    n_paths: usize,
    comp: Compensator,
) -> Result<MartingaleCases> {
    for f in &p.battery {
        f.supported(cfg)?;
    }
    let horizon = p.windows.iter().map(|w| w.1).fold(0.0, f64::max);
    check_window(cfg, start, horizon)?;
    if p.windows.iter().any(|&(a, b)| !(0.0 <= a && a < b)) {
        return Err(LabError::Config("martingale windows need 0 <= a < b".into()));
    }
    let spec = SimSpec::new(horizon, p.mc.step, n_paths);
    let model = PerelmanModel::new(cfg, big_n);
    let torus = !cfg.is_sphere();
    let tau0 = start.tau;
    let win_idx: Vec<(usize, usize)> =
        p.windows.iter().map(|&(a, b)| (spec.saved_index(a), spec.saved_index(b))).collect();
    let nf = p.battery.len();
    let ne = WindowEvent::ALL.len();
    let dim = cfg.stepping_dim();

    let rows = simulate_base_observe(&model, start, &spec, &RngSpec::new(p.mc.seed), |pv: &PathView| {
        let ns = pv.n_saved;
        let mut coeffs = StepCoeffs::new(dim);
        // Z^f at every saved state, trapezoid rule on the compensator
        let mut z = vec![0.0; nf * ns];
        let mut prev = vec![0.0; nf];
        for k in 0..ns {
            let st = pv.state(k);
            let (b0, a00) = match model.step_coeffs(st.tau, st.coords, &mut coeffs) {
                Ok(()) => (coeffs.b[0], 0.5 * coeffs.sigma[0] * coeffs.sigma[0]),
                Err(_) => (f64::NAN, f64::NAN),
            };
            for (fi, f) in p.battery.iter().enumerate() {
                let g = match comp {
                    Compensator::Generator => f.generator(cfg, st.tau, st.coords, b0, a00),
                    Compensator::Heat => f.heat(cfg, st.tau, st.coords),
                }
                .unwrap_or(f64::NAN);
                let integral = if k == 0 { 0.0 } else { z[fi * ns + k - 1] + 0.5 * pv.dt_saved * (prev[fi] + g) };
                prev[fi] = g;
                z[fi * ns + k] = integral;
            }
        }
        let mut out = Vec::with_capacity(nf * win_idx.len() * ne * 2);
        for fi in 0..nf {
            let f = &p.battery[fi];
            let zval = |k: usize| {
                let st = pv.state(k);
                f.eval(st.tau, st.coords) - z[fi * ns + k]
            };
            for (wi, &(ka, kb)) in win_idx.iter().enumerate() {
                let inc = zval(kb) - zval(ka);
                let sa = pv.state(ka);
                for ev in WindowEvent::ALL {
                    let chi = ev.holds(torus, tau0, p.windows[wi].0, sa.tau, sa.coords);
                    out.push(if chi { inc } else { 0.0 });
                    out.push(if chi { 1.0 } else { 0.0 });
                }
            }
        }
        out
    })?;

    let mut cases = MartingaleCases { labels: vec![], means: vec![], stderrs: vec![], skipped: vec![] };
    let mut j = 0;
    for f in &p.battery {
        for &(a, b) in &p.windows {
            for ev in WindowEvent::ALL {
                let label = format!("{} [{a}, {b}] {}", f.label(), ev.label());
                let prob = column(&rows, j + 1).iter().sum::<f64>() / n_paths as f64;
                let trivial = ev != WindowEvent::All && !(0.01..=0.99).contains(&prob);
                if trivial {
                    cases.skipped.push(format!("{label}: P(L) = {prob}"));
                } else {
                    let e = estimate(&column(&rows, j))?;
                    if !e.mean.is_finite() {
                        return Err(LabError::Integrator(format!("non-finite residual for {label}")));
                    }
                    cases.labels.push(label);
                    cases.means.push(e.mean);
                    cases.stderrs.push(e.stderr);
                }
                j += 2;
            }
        }
    }
    Ok(cases)
}

/// Martingale-problem residuals of the projected process under its own
/// generator (must vanish) and under the heat operator (negative control).
pub fn martingale_residual_experiment(
    cfg: &FlowConfig,
    start: &ChartPoint,
    p: &MartingaleParams,
) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new("scalar-convergence", cfg);
    rep.n_grid = p.n_grid.clone();
    for &big_n in &p.n_grid {
        let cases = martingale_cases(cfg, start, p, big_n, p.mc.n_paths, Compensator::Generator)?;
        let z = cases.standardized();
        for (i, l) in cases.labels.iter().enumerate() {
            rep.row(&format!("martingale {l}"))
                .n(big_n)
                .mc(p.mc.n_paths, p.mc.step)
                .est(cases.means[i], Some(cases.stderrs[i]))
                .oracle(0.0)
                .pass(z[i].abs() <= 3.0)
                .push(&mut rep);
        }
        let within = z.iter().filter(|v| v.abs() <= 3.0).count();
        let frac = within as f64 / z.len().max(1) as f64;
        rep.push_check(
            &format!("martingale_N{big_n}"),
            !z.is_empty() && frac >= 0.95,
            frac,
            ">= 95% of cases within 3 stderr",
            format!("{within} of {} cases", z.len()),
        );
        for s in cases.skipped {
            rep.notes.push(format!("skipped {s}"));
        }
    }

    let cases = martingale_cases(cfg, start, p, p.control_n, p.control_paths, Compensator::Heat)?;
    let z = cases.standardized();
    for (i, l) in cases.labels.iter().enumerate() {
        rep.row(&format!("martingale_heat_control {l}"))
            .n(p.control_n)
            .mc(p.control_paths, p.mc.step)
            .est(cases.means[i], Some(cases.stderrs[i]))
            .push(&mut rep);
    }
    let resolved = z.iter().filter(|v| v.abs() > 3.0).count();
    let frac = resolved as f64 / z.len().max(1) as f64;
    rep.push_check(
        "martingale_negative_control",
        frac >= 0.5,
        frac,
        ">= half of cases beyond 3 stderr",
        format!("{resolved} of {} cases at N = {}", z.len(), p.control_n),
    );
    Ok(rep)
}

/// Stepping coordinates of a chart point, for feeding closed forms.
pub fn stepping_coords(cfg: &FlowConfig, p: &ChartPoint) -> Result<Vec<f64>> {
    if cfg.is_sphere() {
        Ok(chart_map(cfg, p, ChartId::Ambient)?.coords)
    } else {
        Ok(p.coords.clone())
    }
}
