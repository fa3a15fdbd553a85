//! Concentration of the block-frame process on orthonormal frames.

use super::{ExperimentReport, McParams};
use crate::backgrounds::{metric_jet, ChartPoint, FlowConfig};
use crate::error::{LabError, Result};
use crate::generators::FrameState;
use crate::perelman::gram_schmidt;
use crate::reference::orthonormality_defect;
use crate::rng::RngSpec;
use crate::sde::{
    column, estimate, estimate_paired, simulate_frame_observe, DiffusionModel, ParabolicModel, PathView,
    PerelmanModel, SimSpec,
};

#[derive(Debug, Clone)]
pub struct FrameParams {
    pub s: f64,
    pub n_grid: Vec<u64>,
    pub mc: McParams,
    /// Frobenius defect of the non-orthonormal control start.
    pub control_defect: f64,
}

/// Observables of one frame path at its last saved state.
const OBS: usize = 6;

fn observe(cfg: &FlowConfig, tau_clock: f64, pv: &PathView) -> Vec<f64> {
    let st = pv.last();
    let frame = st.frame.expect("frame ensemble");
    let n = cfg.n;
    let m = pv.layout.frame_m.unwrap_or(n);
    let (u, e00, leak_row, leak_col) = if m == n {
        (frame.to_vec(), f64::NAN, 0.0, 0.0)
    } else {
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for a in 0..n {
                u[i * n + a] = frame[(i + 1) * m + a + 1];
            }
        }
        let row: f64 = (1..m).map(|b| frame[b].abs()).sum();
        let col: f64 = (1..m).map(|j| frame[j * m].abs()).sum();
        (u, frame[0], row, col)
    };
    // frame states carry chart coordinates
    let x = st.coords.to_vec();
    let defects = orthonormality_defect(cfg, &ChartPoint::new(x.clone(), tau_clock, st.chart), &u).and_then(|dc| {
        Ok((dc, orthonormality_defect(cfg, &ChartPoint::new(x, st.tau, st.chart), &u)?))
    });
    let (d_clock, d_path) = defects.unwrap_or((f64::NAN, f64::NAN));
    vec![d_clock, d_path, leak_row, leak_col, e00, if pv.singular { 1.0 } else { 0.0 }]
}

fn run<M: DiffusionModel>(
    model: &M,
    start: &FrameState,
    s: f64,
    mc: &McParams,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.cfg();
    let spec = SimSpec::new(s, mc.step, mc.n_paths).final_only();
    let tau_clock = start.base.tau + s;
    let rows = simulate_frame_observe(model, start, &spec, &RngSpec::new(mc.seed), |pv| observe(cfg, tau_clock, pv))?;
    debug_assert!(rows.iter().all(|r| r.len() == OBS));
    if rows.iter().any(|r| !r[0].is_finite()) {
        return Err(LabError::Integrator("frame defect is not finite".into()));
    }
    Ok(rows)
}

/// √(τ_s/τ0) law of e^0_0: RK4 of de/ds = e/(2τ) with τ = τ0 + s at step h/100.
pub fn e00_oracle(tau0: f64, s: f64, h: f64) -> f64 {
    let steps = ((s / (h / 100.0)).round() as usize).max(1);
    let dt = s / steps as f64;
    let f = |t: f64, e: f64| e / (2.0 * (tau0 + t));
    let mut e = 1.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let k1 = f(t, e);
        let k2 = f(t + dt / 2.0, e + dt / 2.0 * k1);
        let k3 = f(t + dt / 2.0, e + dt / 2.0 * k2);
        let k4 = f(t + dt, e + dt * k3);
        e += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    e
}

/// Pair (N, 4N) from the grid used for the halving check.
fn halving_pair(grid: &[u64]) -> Option<(u64, u64)> {
    grid.iter().find_map(|&a| grid.iter().find(|&&b| b == 4 * a).map(|&b| (a, b)))
}

/// Block-frame process from 𝔦(u0) with u0 orthonormal at `start`:
/// orthogonality defect of the spatial block against g at the deterministic
/// clock τ0 + s, leakage into the e^0 row and e^·_0 column, and e^0_0.
///
/// The defect's step-size floor is the defect of the parabolic transport of
/// u0 driven by the same Gaussians.
pub fn frame_concentration_experiment(cfg: &FlowConfig, start: &ChartPoint, p: &FrameParams) -> Result<ExperimentReport> {
    cfg.check_tau(start.tau)?;
    if start.tau + p.s > cfg.t_final {
        return Err(LabError::Domain(format!("s = {} runs past T", p.s)));
    }
    let mut rep = ExperimentReport::new("frame-convergence", cfg);
    rep.n_grid = p.n_grid.clone();
    let n = cfg.n;
    let jet = metric_jet(cfg, start)?;
    let g: Vec<f64> = (0..n * n).map(|ij| jet.g(ij / n, ij % n)).collect();
    let u0 = gram_schmidt(&g, n)?;
    let mc = |b: super::RowBuilder, big_n: Option<u64>| {
        let b = b.s(p.s).mc(p.mc.n_paths, p.mc.step);
        match big_n {
            Some(v) => b.n(v),
            None => b,
        }
    };

    let floor_rows = run(&ParabolicModel::new(cfg), &FrameState::spatial(start.clone(), u0.clone())?, p.s, &p.mc)?;
    let floor = estimate(&column(&floor_rows, 0))?;
    mc(rep.row("defect_floor_parabolic"), None).est(floor.mean, Some(floor.stderr)).push(&mut rep);

    // u0 (I + a E_11) has defect |(1+a)² − 1|
    let a = (1.0 + p.control_defect).sqrt() - 1.0;
    let mut u_bad = u0.clone();
    for i in 0..n {
        u_bad[i * n] *= 1.0 + a;
    }

    let start_frame = FrameState::included(start.clone(), &u0)?;
    let bad_frame = FrameState::included(start.clone(), &u_bad)?;
    let tau_s = start.tau + p.s;
    let e00_target = e00_oracle(start.tau, p.s, p.mc.step);
    let n_max = p.n_grid.iter().copied().max().unwrap_or(0);
    let mut excess = vec![];
    let mut control = vec![];
    let mut identically_zero = true;
    for &big_n in &p.n_grid {
        let model = PerelmanModel::new(cfg, big_n);
        let rows = run(&model, &start_frame, p.s, &p.mc)?;
        let d = estimate(&column(&rows, 0))?;
        let dp = estimate(&column(&rows, 1))?;
        let ex = estimate_paired(&column(&rows, 0), &column(&floor_rows, 0))?;
        identically_zero &= column(&rows, 0).iter().all(|v| *v < 1e-12);
        mc(rep.row("defect"), Some(big_n)).est(d.mean, Some(d.stderr)).push(&mut rep);
        mc(rep.row("defect_path_clock"), Some(big_n)).est(dp.mean, Some(dp.stderr)).push(&mut rep);
        mc(rep.row("defect_minus_floor"), Some(big_n)).est(ex.mean, Some(ex.stderr)).push(&mut rep);
        let lr = estimate(&column(&rows, 2))?;
        let lc = estimate(&column(&rows, 3))?;
        mc(rep.row("leakage_e0b"), Some(big_n)).est(lr.mean, Some(lr.stderr)).push(&mut rep);
        mc(rep.row("leakage_ej0"), Some(big_n)).est(lc.mean, Some(lc.stderr)).push(&mut rep);
        let singular = column(&rows, 5).iter().sum::<f64>();
        if singular > 0.0 {
            rep.notes.push(format!("N = {big_n}: {singular} singular frames"));
        }
        let e00 = estimate(&column(&rows, 4))?;
        let tol = 3.0 * e00.stderr + p.mc.step;
        let ok = (e00.mean - e00_target).abs() <= tol;
        let mut row = mc(rep.row("e00"), Some(big_n)).est(e00.mean, Some(e00.stderr)).oracle(e00_target);
        if big_n == n_max {
            row = row.pass(ok);
            rep.push_check(
                "e00_sqrt_law",
                ok,
                (e00.mean - e00_target).abs(),
                "<= 3 stderr + h",
                format!("N = {big_n}, oracle sqrt({tau_s}/{}) = {e00_target}", start.tau),
            );
        }
        row.push(&mut rep);
        excess.push((big_n, ex));

        let rows_bad = run(&model, &bad_frame, p.s, &p.mc)?;
        let db = estimate(&column(&rows_bad, 0))?;
        mc(rep.row("defect_nonorthonormal_start"), Some(big_n)).est(db.mean, Some(db.stderr)).push(&mut rep);
        control.push((big_n, db));
    }

    if identically_zero {
        rep.notes.push("spatial frame block is constant along paths, defect vanishes identically".into());
        rep.push_check("defect_bound", true, 0.0, "<= 0.05", "identically zero".into());
    } else if let Some((lo, hi)) = halving_pair(&p.n_grid) {
        let get = |v: &Vec<(u64, crate::sde::Estimate)>, k: u64| v.iter().find(|e| e.0 == k).map(|e| e.1).unwrap();
        let (el, eh) = (get(&excess, lo), get(&excess, hi));
        let ratio = el.mean / eh.mean;
        rep.push_check(
            "defect_halving",
            (1.4..=2.6).contains(&ratio),
            ratio,
            "(D(N) - floor)/(D(4N) - floor) in [1.4, 2.6]",
            format!("N = {lo}: {:.4e} +- {:.1e}, N = {hi}: {:.4e} +- {:.1e}", el.mean, el.stderr, eh.mean, eh.stderr),
        );
        let (cl, ch) = (get(&control, lo), get(&control, hi));
        let cr = cl.mean / ch.mean;
        rep.push_check(
            "defect_negative_control",
            !(1.4..=2.6).contains(&cr),
            cr,
            "non-orthonormal start: D(N)/D(4N) outside [1.4, 2.6]",
            format!("start defect {}", p.control_defect),
        );
    } else {
        rep.notes.push("no (N, 4N) pair in the grid, halving not checked".into());
    }
    Ok(rep)
}
