use rflab::backgrounds::{metric_jet, ChartId, ChartPoint, FlowConfig};
use rflab::generators::FrameState;
use rflab::perelman::gram_schmidt;
use rflab::reference::{
    heat_expectation, parabolic_base_paths, parabolic_transport, HeatMethod, HeatTarget, ReferencePath,
};
use rflab::rng::RngSpec;
use rflab::sde::{estimate, variance_estimate, SimSpec};

fn sphere_start() -> (FlowConfig, ChartPoint, FrameState) {
    let cfg = FlowConfig::sphere_default();
    let p = ChartPoint::new(vec![0.3, -0.2], 0.04, ChartId::North);
    let jet = metric_jet(&cfg, &p).unwrap();
    let g: Vec<f64> = (0..4).map(|ij| jet.g(ij / 2, ij % 2)).collect();
    let u0 = FrameState::spatial(p.clone(), gram_schmidt(&g, 2).unwrap()).unwrap();
    (cfg, p, u0)
}

fn transported(h: f64, s: f64, n_paths: usize) -> (FlowConfig, Vec<ReferencePath>) {
    let (cfg, p, u0) = sphere_start();
    let ens = parabolic_base_paths(&cfg, &p, &SimSpec::new(s, h, n_paths), &RngSpec::new(3)).unwrap();
    let paths = (0..n_paths).map(|i| parabolic_transport(&cfg, &ens.path(i), 1, &u0).unwrap()).collect();
    (cfg, paths)
}

fn mean_final_defect(h: f64, s: f64) -> f64 {
    let (cfg, paths) = transported(h, s, 200);
    let d: Vec<f64> = paths.iter().map(|r| r.orthonormality_defect(&cfg, r.frames.len() - 1).unwrap()).collect();
    estimate(&d).unwrap().mean
}

#[test]
fn transport_defect_decays_first_order_in_h() {
    let d: Vec<f64> = [2e-3, 1e-3, 5e-4].iter().map(|&h| mean_final_defect(h, 0.3)).collect();
    for w in d.windows(2) {
        let r = w[0] / w[1];
        assert!((1.6..=2.5).contains(&r), "defects {d:?}");
    }
}

/// Mean over paths of diag(uᵀgu − I) and of ‖uᵀgu − I‖_F after one step.
fn one_step_defect(h: f64) -> (f64, f64) {
    let (cfg, paths) = transported(h, h, 100_000);
    let mut signed = vec![];
    let mut norm = vec![];
    for r in &paths {
        let f = &r.frames[1];
        let jet = metric_jet(&cfg, &f.base).unwrap();
        let u = &f.e;
        let gram = |a: usize, b: usize| {
            let mut v = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    v += u[i * 2 + a] * jet.g(i, j) * u[j * 2 + b];
                }
            }
            v
        };
        signed.push(gram(0, 0) + gram(1, 1) - 2.0);
        norm.push(r.orthonormality_defect(&cfg, 1).unwrap());
    }
    (estimate(&signed).unwrap().mean, estimate(&norm).unwrap().mean)
}

// The systematic part of the per-step defect is O(h²); the pathwise part
// is O(h^{3/2}) with mean zero, which is what makes the global defect O(h).
#[test]
fn one_step_defect_orders() {
    let (s1, n1) = one_step_defect(2e-3);
    let (s2, n2) = one_step_defect(1e-3);
    let (s3, n3) = one_step_defect(5e-4);
    for r in [s1 / s2, s2 / s3] {
        assert!((3.2..=4.8).contains(&r), "signed ratios {} {}", s1 / s2, s2 / s3);
    }
    let want = 2f64.powf(1.5);
    for r in [n1 / n2, n2 / n3] {
        assert!((r - want).abs() < 0.35, "norm ratios {} {}", n1 / n2, n2 / n3);
    }
}

#[test]
fn volume_is_compatible_with_the_flow() {
    // det(uᵀgu) = det(u)² det(g), and its distance from 1 is bounded by the defect
    let (cfg, paths) = transported(1e-3, 0.3, 50);
    let mut drift = 0.0f64;
    for r in &paths {
        let v0 = r.frames[0].det.abs() * {
            let jet = metric_jet(&cfg, &r.frames[0].base).unwrap();
            (jet.g(0, 0) * jet.g(1, 1) - jet.g(0, 1) * jet.g(1, 0)).sqrt()
        };
        assert!((v0 - 1.0).abs() < 1e-12);
        for (k, f) in r.frames.iter().enumerate() {
            let jet = metric_jet(&cfg, &f.base).unwrap();
            let det_g = jet.g(0, 0) * jet.g(1, 1) - jet.g(0, 1) * jet.g(1, 0);
            let v2 = f.det * f.det * det_g;
            let d = r.orthonormality_defect(&cfg, k).unwrap();
            assert!((v2 - 1.0).abs() <= (1.0 + d).powi(2) - 1.0 + 1e-12, "step {k}: {v2} with defect {d}");
            drift = drift.max((v2.sqrt() - 1.0).abs());
        }
    }
    assert!(drift < 0.05, "volume drift {drift}");
}

#[test]
fn reorthonormalize_removes_the_defect() {
    let (cfg, mut paths) = transported(2e-3, 0.2, 5);
    for r in &mut paths {
        assert!(r.orthonormality_defect(&cfg, r.frames.len() - 1).unwrap() > 1e-6);
        r.reorthonormalize(&cfg).unwrap();
        for k in 0..r.frames.len() {
            assert!(r.orthonormality_defect(&cfg, k).unwrap() < 1e-12);
        }
    }
}

#[test]
fn clock_runs_backwards_with_unit_speed() {
    let (cfg, paths) = transported(1e-3, 0.1, 3);
    for r in &paths {
        for (t, c) in r.times.iter().zip(&r.clock) {
            assert!((c - (cfg.calt() - 0.04 - t)).abs() < 1e-12);
        }
    }
}

#[test]
fn torus_marginal_variance_is_two_s() {
    let cfg = FlowConfig::torus_default();
    let p = ChartPoint::new(vec![0.7, 0.4], 0.1, ChartId::Periodic);
    let s = 0.5;
    let ens = parabolic_base_paths(&cfg, &p, &SimSpec::new(s, 1e-2, 20_000).final_only(), &RngSpec::new(8)).unwrap();
    for i in 0..2 {
        let xs: Vec<f64> = (0..ens.n_paths).map(|k| ens.path(k).last().coords[i]).collect();
        let m = estimate(&xs).unwrap();
        assert!((m.mean - p.coords[i]).abs() <= 3.0 * m.stderr);
        let v = variance_estimate(&xs).unwrap();
        assert!((v.mean - 2.0 * s).abs() <= 3.0 * v.stderr, "coordinate {i}: variance {}", v.mean);
    }
    let taus: Vec<f64> = (0..ens.n_paths).map(|k| ens.path(k).last().tau).collect();
    assert!(taus.iter().all(|t| (t - 0.6).abs() < 1e-12));
}

#[test]
fn monte_carlo_heat_flow_matches_closed_form() {
    let cases = [
        (
            FlowConfig::torus_default(),
            ChartPoint::new(vec![0.7, 0.4], 0.1, ChartId::Periodic),
            HeatTarget::TorusMode { amp: 1.0, k: vec![1.0, 1.0], phase: 0.2 },
            0.4,
        ),
        (
            FlowConfig::sphere_default(),
            ChartPoint::new(vec![0.3, -0.2], 0.04, ChartId::North),
            HeatTarget::SphereCoordinate { amp: 1.0, axis: 2 },
            0.2,
        ),
        (
            FlowConfig::sphere_default(),
            ChartPoint::new(vec![0.3, -0.2], 0.04, ChartId::North),
            HeatTarget::SphereCoordinate { amp: 2.0, axis: 0 },
            0.2,
        ),
    ];
    for (cfg, p, target, d) in cases {
        let exact = heat_expectation(&cfg, &target, &p, d, HeatMethod::ClosedForm).unwrap().mean;
        let mc = heat_expectation(&cfg, &target, &p, d, HeatMethod::MonteCarlo { n_paths: 20_000, step: 1e-3, seed: 4 })
            .unwrap();
        assert!((mc.mean - exact).abs() <= 3.0 * mc.stderr, "{target:?}: {} vs {exact} +- {}", mc.mean, mc.stderr);
    }
}
