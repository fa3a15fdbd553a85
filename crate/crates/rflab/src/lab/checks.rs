//! Deterministic checks: the background flows, the Christoffel table, the
//! Ricci bound, the scalar defect and the frame-operator decomposition.

use super::{loglog_slope, ExperimentReport};
use crate::backgrounds::{
    chart_map, metric_jet, ricci_flow_residual, ricci_flow_residual_signed, sample_grid, ChartPoint, FlowConfig,
    MetricJet,
};
use crate::error::Result;
use crate::generators::{
    asymptotic_operators_apply, epsilon_n, frame_battery, frame_generator_apply, frame_generator_diffusion,
    heat_operator_apply, ricci_flow_frame_operator, scalar_battery, scalar_defect, scalar_generator,
    spatial_block_battery, sphere_leakage_correction, Arity, FrameState, InclusionPullback, IndexConvention,
    PolyTrig, TestFunction,
};
use crate::perelman::{curvature_fd, full_chart_metric, gram_schmidt_from, horizontal_laplacian_fd, orthonormal_lift};
use crate::rng::RngSpec;
use nalgebra::{DMatrix, SymmetricEigen};

const SAMPLE_MARGIN: f64 = 0.05;

/// Ricci-flow residual on 100 sample points per background, with the
/// sign-flipped control wherever Ric ≠ 0.
pub fn ricci_validate(cfgs: &[FlowConfig]) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::named("ricci-validate", &labels(cfgs));
    for cfg in cfgs {
        let pts = sample_grid(cfg, 100, SAMPLE_MARGIN);
        let res = ricci_flow_residual(cfg, &pts, 1e-4)?;
        let label = cfg.background.label();
        rep.row("ricci_residual").est(res, None).pass(res <= 1e-6).push(&mut rep);
        rep.push_check(&format!("residual_{label}"), res <= 1e-6, res, "<= 1e-6", format!("{label}, 100 points"));
        let ric_max = pts
            .iter()
            .map(|p| metric_jet(cfg, p).map(|j| j.ric.iter().fold(0.0f64, |a, v| a.max(v.abs()))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        if ric_max > 0.0 {
            let neg = ricci_flow_residual_signed(cfg, &pts, 1e-4, -1.0)?;
            rep.row("ricci_residual_sign_flipped").est(neg, None).pass(neg > 1e-2).push(&mut rep);
            rep.push_check(&format!("negative_control_{label}"), neg > 1e-2, neg, "> 1e-2", label.into());
        } else {
            rep.notes.push(format!("{label}: Ric = 0, the sign-flipped control is the same equation"));
        }
    }
    Ok(rep)
}

fn labels(cfgs: &[FlowConfig]) -> String {
    cfgs.iter().map(|c| c.background.label()).collect::<Vec<_>>().join("+")
}

fn full_chart_point(cfg: &FlowConfig, p: &ChartPoint, chart: crate::backgrounds::ChartId, n_small: usize) -> Result<Vec<f64>> {
    let pc = chart_map(cfg, p, chart)?;
    let mut q = vec![p.tau];
    q.extend(pc.coords.iter());
    q.extend((0..n_small).map(|i| 0.1 * (i as f64 + 1.0)));
    Ok(q)
}

/// Finite-difference Christoffels of the full chart against the table, as
/// max |fd − table| / max |table| per point.
pub fn christoffel_check(cfgs: &[FlowConfig], n_small: &[usize], n_points: usize) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::named("curvature-check", &labels(cfgs));
    for cfg in cfgs {
        let pts = sample_grid(cfg, n_points, SAMPLE_MARGIN);
        for &ns in n_small {
            let fcm = full_chart_metric(cfg, ns)?;
            let mut worst: f64 = 0.0;
            for p in &pts {
                let q = full_chart_point(cfg, p, fcm.base_chart, ns)?;
                let fd = fcm.christoffels_fd(&q, 1e-4)?;
                let tab = fcm.table_christoffels(&q)?;
                let scale = tab.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
                let err = fd.iter().zip(&tab).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                worst = worst.max(err / scale);
            }
            rep.row("christoffel_rel_err").n(ns as u64).est(worst, None).pass(worst <= 1e-5).push(&mut rep);
            rep.push_check(
                &format!("christoffel_{}_N{ns}", cfg.background.label()),
                worst <= 1e-5,
                worst,
                "<= 1e-5 relative",
                format!("{n_points} points"),
            );
        }
    }
    Ok(rep)
}

/// N · sup |Ric_G| in a G-orthonormal frame, per sample point across N.
pub fn ricci_scaling_check(cfg: &FlowConfig, n_small: &[usize], n_points: usize) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new("curvature-check", cfg);
    rep.n_grid = n_small.iter().map(|&n| n as u64).collect();
    let pts = sample_grid(cfg, n_points, SAMPLE_MARGIN);
    let mut per_n: Vec<Vec<f64>> = vec![];
    for &ns in n_small {
        let fcm = full_chart_metric(cfg, ns)?;
        let mut vals = vec![];
        for p in &pts {
            let q = full_chart_point(cfg, p, fcm.base_chart, ns)?;
            let c = curvature_fd(&fcm, &q, 1e-4)?;
            vals.push(ns as f64 * c.sup_ric_frame);
        }
        let mx = vals.iter().cloned().fold(0.0, f64::max);
        rep.row("N_sup_ric_max_over_points").n(ns as u64).est(mx, None).push(&mut rep);
        per_n.push(vals);
    }
    let mut worst_ratio: f64 = 1.0;
    let mut failing = 0;
    for k in 0..pts.len() {
        let v: Vec<f64> = per_n.iter().map(|row| row[k]).collect();
        let mx = v.iter().cloned().fold(0.0, f64::max);
        let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let r = if mn > 0.0 { mx / mn } else { f64::INFINITY };
        if !(r < 2.0) {
            failing += 1;
            rep.notes.push(format!("point tau = {:.4}: N*sup|Ric| = {v:?}, ratio {r:.3}", pts[k].tau));
        }
        worst_ratio = worst_ratio.max(r);
    }
    rep.push_check(
        "ricci_scaling_per_point",
        failing == 0,
        worst_ratio,
        "max/min over N < 2 at every point",
        format!("{failing} of {} points fail", pts.len()),
    );
    let uniform: Vec<f64> = per_n.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
    let ur = uniform.iter().cloned().fold(0.0, f64::max) / uniform.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.notes.push(format!("uniform constant N*max_points sup|Ric| = {uniform:?}, ratio {ur:.3}"));
    Ok(rep)
}

/// Scalar generator defect: identity with the closed form, and 1/N decay.
pub fn scalar_defect_check(cfgs: &[FlowConfig], n_grid: &[u64], n_points: usize) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::named("operator-check", &labels(cfgs));
    rep.n_grid = n_grid.to_vec();
    let battery = scalar_battery();
    let mut identity_err: f64 = 0.0;
    let mut maxima = vec![0.0f64; n_grid.len()];
    for cfg in cfgs {
        for p in sample_grid(cfg, n_points, SAMPLE_MARGIN) {
            let jet = metric_jet(cfg, &p)?;
            for f in &battery {
                for (k, &n) in n_grid.iter().enumerate() {
                    let d = scalar_defect(f, &p, &jet, n)?;
                    let e = epsilon_n(f, &p, &jet, n)?;
                    let w = base_w(&p);
                    let scale = heat_operator_apply(f, &w, &jet).abs().max(1.0);
                    identity_err = identity_err.max((d - e).abs() / scale);
                    maxima[k] = maxima[k].max(d.abs());
                }
            }
        }
    }
    rep.push_check("epsilon_identity", identity_err <= 1e-12, identity_err, "<= 1e-12", "scalar battery".into());
    for (k, &n) in n_grid.iter().enumerate() {
        rep.row("max_scalar_defect").n(n).est(maxima[k], None).push(&mut rep);
    }
    let mut ok = true;
    let mut worst: f64 = 0.5;
    for k in 1..n_grid.len() {
        let ratio = maxima[k] / maxima[k - 1];
        let expect = n_grid[k - 1] as f64 / n_grid[k] as f64;
        let rel = ratio / expect;
        ok &= (0.8..=1.2).contains(&rel);
        if (rel - 1.0).abs() > (worst / 0.5 - 1.0).abs() {
            worst = ratio;
        }
    }
    rep.push_check("scalar_defect_halving", ok, worst, "ratio in [0.4, 0.6] per doubling", format!("{maxima:?}"));
    Ok(rep)
}

fn base_w(p: &ChartPoint) -> Vec<f64> {
    std::iter::once(p.tau).chain(p.coords.iter().copied()).collect()
}

#[derive(Debug, Clone)]
pub struct OperatorCheckParams {
    pub n_states: usize,
    pub n_grid: Vec<u64>,
    pub oracle_n: Vec<usize>,
    pub oracle_states: usize,
    pub seed: u64,
}

impl Default for OperatorCheckParams {
    fn default() -> Self {
        Self { n_states: 20, n_grid: vec![1000, 2000, 4000, 8000], oracle_n: vec![2, 4], oracle_states: 3, seed: 7 }
    }
}

fn random_frame(rng: &mut crate::rng::PathRng, m: usize) -> Vec<f64> {
    loop {
        let mut e = crate::perelman::identity(m);
        for v in e.iter_mut() {
            *v += 0.35 * rng.gaussian();
        }
        if crate::generators::determinant(&e, m).abs() > 0.2 {
            return e;
        }
    }
}

fn block_metric(jet: &MetricJet, q00: f64) -> Vec<f64> {
    let n = jet.n;
    let m = n + 1;
    let mut bm = vec![0.0; m * m];
    bm[0] = q00;
    for i in 0..n {
        for j in 0..n {
            bm[(i + 1) * m + j + 1] = jet.g(i, j);
        }
    }
    bm
}

/// Base-only function read through the frame arity.
fn as_frame_function(f: &PolyTrig, m: usize) -> PolyTrig {
    PolyTrig { arity: Arity::Frame { d: m, m }, terms: f.terms.clone() }
}

/// Frame generator against its oracles, and the 𝒟 + 𝒩 decomposition under
/// every index convention.
pub fn operator_check(cfgs: &[FlowConfig], params: &OperatorCheckParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::named("operator-check", &labels(cfgs));
    rep.n_grid = params.n_grid.clone();
    let rng = RngSpec::new(params.seed);
    let battery = frame_battery();
    let spatial = spatial_block_battery();

    let mut base_err: f64 = 0.0;
    let mut psd_min: f64 = f64::INFINITY;
    let mut oracle_err: f64 = 0.0;
    let mut incl_d: f64 = 0.0;
    let mut incl_n: f64 = 0.0;
    let mut incl_d_literal: f64 = 0.0;
    let mut resid = vec![vec![0.0f64; params.n_grid.len()]; IndexConvention::ALL.len()];

    for (ci, cfg) in cfgs.iter().enumerate() {
        let n = cfg.n;
        let m = n + 1;
        let mut stream = rng.derive(ci as u64).path_stream(0);
        for (si, p) in sample_grid(cfg, params.n_states, SAMPLE_MARGIN).into_iter().enumerate() {
            let jet = metric_jet(cfg, &p)?;
            let state = FrameState::new(p.clone(), random_frame(&mut stream, m))?;
            for (k, &big_n) in params.n_grid.iter().enumerate() {
                for psi in &battery {
                    let l = frame_generator_apply(psi, &state, &jet, big_n)?;
                    for (c, conv) in IndexConvention::ALL.iter().enumerate() {
                        let (d, nn) = asymptotic_operators_apply(psi, &state, &jet, *conv)?;
                        resid[c][k] = resid[c][k].max((l - d - nn).abs());
                    }
                }
            }
            // base-marginal consistency
            let big_n = params.n_grid[0];
            let gc = scalar_generator(&jet, p.tau, big_n)?;
            let w = base_w(&p);
            for f in scalar_battery() {
                let ff = as_frame_function(&f, m);
                let l = frame_generator_apply(&ff, &state, &jet, big_n)?;
                let want = gc.apply(&f.grad(&w), &f.hess(&w));
                base_err = base_err.max((l - want).abs() / want.abs().max(1.0));
            }
            // diffusion part is PSD
            let a = frame_generator_diffusion(&state, &jet, big_n)?;
            let dim = (a.len() as f64).sqrt() as usize;
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &a)).eigenvalues;
            let scale = eig.iter().fold(0.0f64, |x, v| x.max(v.abs())).max(1.0);
            psd_min = psd_min.min(eig.iter().cloned().fold(f64::INFINITY, f64::min) / scale);

            // identity on the inclusion of orthonormal frames
            let gm: Vec<f64> = (0..n * n).map(|ij| jet.g(ij / n, ij % n)).collect();
            let u = gram_schmidt_from(&gm, n, &random_frame(&mut stream, n))?;
            let incl = FrameState::included(p.clone(), &u)?;
            let mut wu = w.clone();
            wu.extend_from_slice(&u);
            for psi in &spatial {
                let hat = InclusionPullback { inner: psi, n };
                let rf = ricci_flow_frame_operator(&hat, &wu, &jet)?;
                let (d, nn) = asymptotic_operators_apply(psi, &incl, &jet, IndexConvention::Regrouped)?;
                incl_d = incl_d.max((d - rf).abs() / rf.abs().max(1.0));
                incl_n = incl_n.max(nn.abs());
                let (dl, _) = asymptotic_operators_apply(psi, &incl, &jet, IndexConvention::FullBlock)?;
                incl_d_literal = incl_d_literal.max((dl - rf).abs() / rf.abs().max(1.0));
            }

            // small-N ground truth
            if si < params.oracle_states {
                for &ns in &params.oracle_n {
                    let fcm = full_chart_metric(cfg, ns)?;
                    let pj = chart_map(cfg, &p, fcm.base_chart)?;
                    let jet_o = metric_jet(cfg, &pj)?;
                    let q = full_chart_point(cfg, &p, fcm.base_chart, ns)?;
                    let pc = crate::perelman::perelman_coefficients(&jet_o, p.tau, ns as u64)?;
                    let eb = gram_schmidt_from(&block_metric(&jet_o, 1.0 / pc.g00_inv), m, &random_frame(&mut stream, m))?;
                    let st = FrameState::new(pj.clone(), eb.clone())?;
                    let lift = orthonormal_lift(&fcm, &q, &eb);
                    for psi in &battery {
                        let o = horizontal_laplacian_fd(&fcm, &q, &lift, psi, 1e-4, 1e-3)?;
                        let l = frame_generator_apply(psi, &st, &jet_o, ns as u64)?;
                        let c = sphere_leakage_correction(psi, &st, &jet_o, ns as u64)?;
                        oracle_err = oracle_err.max((o - l - c).abs() / o.abs().max(1.0));
                    }
                }
            }
        }
    }

    rep.push_check("base_marginal_consistency", base_err <= 1e-12, base_err, "<= 1e-12", String::new());
    rep.push_check("diffusion_psd", psd_min >= -1e-12, psd_min, "min eigenvalue / scale >= -1e-12", String::new());
    rep.push_check(
        "small_n_oracle",
        oracle_err <= 1e-4,
        oracle_err,
        "<= 1e-4 relative",
        format!("N_small = {:?}, horizontal Laplacian of the full chart plus sphere leakage term", params.oracle_n),
    );
    rep.push_check("inclusion_D_equals_RF_operator", incl_d <= 1e-10, incl_d, "<= 1e-10", "regrouped".into());
    rep.push_check("inclusion_N_vanishes", incl_n <= 1e-12, incl_n, "<= 1e-12", "regrouped".into());
    rep.notes.push(format!("literal displays on the inclusion: max |D - (D_tau + Delta_H)| = {incl_d_literal:.3e}"));

    let xs: Vec<f64> = params.n_grid.iter().map(|&n| n as f64).collect();
    let mut best = 0;
    for (c, conv) in IndexConvention::ALL.iter().enumerate() {
        for (k, &n) in params.n_grid.iter().enumerate() {
            rep.row(&format!("decomposition_residual_{}", conv.label())).n(n).est(resid[c][k], None).push(&mut rep);
        }
        if resid[c].last() < resid[best].last() {
            best = c;
        }
        let fit = loglog_slope(&format!("decomposition_{}", conv.label()), &xs, &resid[c])?;
        rep.slopes.push(fit);
    }
    let sel = IndexConvention::ALL[best];
    let fit = rep.slopes[best].clone();
    rep.notes.push(format!("selected convention: {} (smallest residual against L^N at the largest N)", sel.label()));
    rep.push_check(
        "decomposition_slope",
        (-1.3..=-0.7).contains(&fit.slope),
        fit.slope,
        "in [-1.3, -0.7]",
        format!("convention {}, residuals {:?}", sel.label(), resid[best]),
    );
    Ok(rep)
}
