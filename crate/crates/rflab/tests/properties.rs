use proptest::prelude::*;
use rflab::backgrounds::{chart_map, metric_jet, ChartId, ChartPoint, FlowConfig};
use rflab::config::{parse_config, RunConfig, Scenario};
use rflab::lab::loglog_slope;
use rflab::perelman::perelman_coefficients;
use rflab::rng::RngSpec;
use rflab::sde::{fmt_num, simulate_base_paths, DiffusionModel, PerelmanModel, SimSpec, StepCoeffs};

fn tau_in(cfg: &FlowConfig) -> impl Strategy<Value = f64> {
    (cfg.delta + 1e-3)..(cfg.t_final - 1e-3)
}

fn sphere_point() -> impl Strategy<Value = ChartPoint> {
    let cfg = FlowConfig::sphere_default();
    (-2.0..2.0f64, -2.0..2.0f64, tau_in(&cfg)).prop_map(|(a, b, t)| ChartPoint::new(vec![a, b], t, ChartId::North))
}

fn torus_point() -> impl Strategy<Value = ChartPoint> {
    let cfg = FlowConfig::torus_default();
    (-10.0..10.0f64, -10.0..10.0f64, tau_in(&cfg)).prop_map(|(a, b, t)| ChartPoint::new(vec![a, b], t, ChartId::Periodic))
}

/// σσᵀ for the stepping coefficients.
fn two_a(sc: &StepCoeffs) -> Vec<f64> {
    let d = sc.dim;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| sc.sigma[i * d + k] * sc.sigma[j * d + k]).sum();
        }
    }
    out
}

fn is_psd(m: &[f64], d: usize) -> bool {
    let mat = nalgebra::DMatrix::from_row_slice(d, d, m);
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    mat.symmetric_eigen().eigenvalues.iter().all(|&l| l >= -1e-12 * scale)
}

proptest! {
    #[test]
    fn metric_times_inverse_is_identity(p in prop_oneof![sphere_point(), torus_point()]) {
        let cfg = if p.chart == ChartId::North { FlowConfig::sphere_default() } else { FlowConfig::torus_default() };
        let jet = metric_jet(&cfg, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| jet.g(i, k) * jet.g_inv(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chart_round_trip(p in sphere_point().prop_filter("away from the poles", |p| {
        let r = p.coords.iter().map(|v| v * v).sum::<f64>().sqrt();
        r > 0.05
    })) {
        let cfg = FlowConfig::sphere_default();
        let south = chart_map(&cfg, &p, ChartId::South).unwrap();
        let ambient = chart_map(&cfg, &south, ChartId::Ambient).unwrap();
        prop_assert!((ambient.coords.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let back = chart_map(&cfg, &ambient, ChartId::North).unwrap();
        prop_assert_eq!(back.tau, p.tau);
        for (a, b) in back.coords.iter().zip(&p.coords) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn clock_variance_rate_decreases_in_n(p in prop_oneof![sphere_point(), torus_point()], n in 1u64..100_000) {
        let cfg = if p.chart == ChartId::North { FlowConfig::sphere_default() } else { FlowConfig::torus_default() };
        let jet = metric_jet(&cfg, &p).unwrap();
        let lo = perelman_coefficients(&jet, p.tau, n).unwrap().g00_inv;
        let hi = perelman_coefficients(&jet, p.tau, n + 1).unwrap().g00_inv;
        prop_assert!(hi < lo && hi > 0.0);
        prop_assert!(lo <= 2.0 * p.tau / n as f64 + 1e-15);
    }

    #[test]
    fn torus_diffusion_projects_to_the_base(p in torus_point(), n in 1u64..10_000) {
        let cfg = FlowConfig::torus_default();
        let model = PerelmanModel::new(&cfg, n);
        let mut sc = StepCoeffs::new(3);
        model.step_coeffs(p.tau, &p.coords, &mut sc).unwrap();
        let a = two_a(&sc);
        prop_assert!(is_psd(&a, 3));
        let nf = n as f64;
        prop_assert!((a[0] - 4.0 * p.tau / nf).abs() < 1e-12);
        prop_assert!((sc.b[0] - (1.0 + 1.0 / nf)).abs() < 1e-12);
        let jet = metric_jet(&cfg, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((a[(i + 1) * 3 + j + 1] - 2.0 * jet.g_inv(i, j)).abs() < 1e-12);
            }
            prop_assert!(a[i + 1].abs() < 1e-14);
        }
    }

    #[test]
    fn sphere_diffusion_is_tangent_and_psd(
        y in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_filter("nonzero", |(a, b, c)| a * a + b * b + c * c > 0.01),
        tau in tau_in(&FlowConfig::sphere_default()),
        n in 1u64..10_000,
    ) {
        let cfg = FlowConfig::sphere_default();
        let r = (y.0 * y.0 + y.1 * y.1 + y.2 * y.2).sqrt();
        let y = [y.0 / r, y.1 / r, y.2 / r];
        let mut sc = StepCoeffs::new(4);
        PerelmanModel::new(&cfg, n).step_coeffs(tau, &y, &mut sc).unwrap();
        let a = two_a(&sc);
        prop_assert!(is_psd(&a, 4));
        let jet = metric_jet(&cfg, &ChartPoint::new(y.to_vec(), tau, ChartId::Ambient)).unwrap();
        prop_assert!((a[0] - 2.0 / (n as f64 / (2.0 * tau) + jet.scal)).abs() < 1e-12);
        // no noise along the normal direction
        for i in 1..4 {
            let radial: f64 = (0..3).map(|j| a[i * 4 + j + 1] * y[j]).sum();
            prop_assert!(radial.abs() < 1e-12);
        }
    }

    #[test]
    fn fmt_num_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn resolved_config_round_trips(
        seed in any::<u64>(),
        paths in proptest::option::of(1usize..1_000_000),
        step in proptest::option::of(1e-6..0.1f64),
        n_list in proptest::option::of(proptest::collection::vec(1u64..1_000_000, 1..5)),
        scenario in 0usize..8,
        workers in 0usize..8,
    ) {
        let scenario = if scenario == 7 { Scenario::All } else { Scenario::SEQUENCE[scenario] };
        let cfg = RunConfig { scenario, seed, n_paths: paths, step, n_list, workers, ..RunConfig::default() };
        let text = cfg.resolved_text();
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(back.resolved_text(), text);
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.step, step);
    }

    #[test]
    fn loglog_slope_recovers_power_laws(
        p in -3.0..3.0f64,
        c in 1e-3..1e3f64,
        xs in proptest::collection::btree_set(1u32..100_000, 3..8),
    ) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(p)).collect();
        let fit = loglog_slope("power law", &xs, &ys).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-9);
        prop_assert!(fit.stderr < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn paths_stay_in_the_time_domain(
        sphere in any::<bool>(),
        n in 1u64..20,
        seed in any::<u64>(),
        frac in 0.0..1.0f64,
    ) {
        let (cfg, start) = if sphere {
            (FlowConfig::sphere_default(), ChartPoint::new(vec![0.3, -0.2], 0.0, ChartId::North))
        } else {
            (FlowConfig::torus_default(), ChartPoint::new(vec![0.7, 0.4], 0.0, ChartId::Periodic))
        };
        let tau0 = cfg.delta + frac * (cfg.t_final - cfg.delta);
        let start = ChartPoint { tau: tau0, ..start };
        let horizon = ((cfg.t_final - tau0 + 0.05) / 5e-3).ceil() * 5e-3;
        let ens = simulate_base_paths(&PerelmanModel::new(&cfg, n), &start, &SimSpec::new(horizon, 5e-3, 20), &RngSpec::new(seed))
            .unwrap();
        for i in 0..ens.n_paths {
            let path = ens.path(i);
            for k in 0..path.n_saved {
                let t = path.state(k).tau;
                prop_assert!(t >= cfg.delta - 1e-9 && t <= cfg.t_final + 1e-9, "tau {t} outside the domain");
            }
            if let Some(at) = path.stopped_at {
                prop_assert!(at > 0.0 && at <= horizon + 1e-9);
                let t = path.last().tau;
                prop_assert!((t - cfg.delta).abs() < 1e-9 || (t - cfg.t_final).abs() < 1e-9, "stopped at tau {t}");
            }
        }
    }
}
