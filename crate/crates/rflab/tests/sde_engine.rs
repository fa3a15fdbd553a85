use rflab::backgrounds::{metric_jet, ChartId, ChartPoint, FlowConfig};
use rflab::generators::{frame_battery, frame_generator_apply, include_frame, FrameState, TestFunction};
use rflab::perelman::gram_schmidt;
use rflab::rng::RngSpec;
use rflab::sde::{
    column, estimate, simulate_base_observe, simulate_base_paths, simulate_frame_observe, simulate_frame_paths,
    variance_estimate, PerelmanModel, SimSpec,
};

/// g-orthonormal spatial block with a perturbed e^0 row, so every battery
/// member has a nonzero first variation.
fn generic_state(cfg: &FlowConfig, p: ChartPoint) -> FrameState {
    let jet = metric_jet(cfg, &p).unwrap();
    let g: Vec<f64> = (0..4).map(|ij| jet.g(ij / 2, ij % 2)).collect();
    let mut e = include_frame(&gram_schmidt(&g, 2).unwrap(), 2);
    e[0] = 1.1;
    e[1] = 0.1;
    e[3] = -0.05;
    FrameState::new(p, e).unwrap()
}

fn one_step_drift(cfg: &FlowConfig, st: &FrameState, big_n: u64, h: f64, n_paths: usize) -> Vec<(f64, f64)> {
    let bat = frame_battery();
    let spec = SimSpec::new(h, h, n_paths).final_only();
    let rows = simulate_frame_observe(&PerelmanModel::new(cfg, big_n), st, &spec, &RngSpec::new(5), |pv| {
        let s = pv.last();
        let mut w = vec![s.tau];
        w.extend_from_slice(s.coords);
        w.extend_from_slice(s.frame.unwrap());
        bat.iter().map(|f| f.eval(&w)).collect()
    })
    .unwrap();
    let w0 = st.args();
    bat.iter()
        .enumerate()
        .map(|(k, f)| {
            let e = estimate(&column(&rows, k)).unwrap();
            ((e.mean - f.eval(&w0)) / h, e.stderr / h)
        })
        .collect()
}

// (E[ψ(one step)] − ψ)/h = L^N ψ + O(h); the Richardson combination at h and
// h/4 removes the first-order term.
#[test]
fn empirical_generator_matches_frame_generator() {
    for (cfg, p) in [
        (FlowConfig::torus_default(), ChartPoint::new(vec![0.7, 0.4], 0.3, ChartId::Periodic)),
        (FlowConfig::sphere_default(), ChartPoint::new(vec![0.3, -0.2], 0.1, ChartId::North)),
    ] {
        let big_n = 10;
        let st = generic_state(&cfg, p);
        let jet = metric_jet(&cfg, &st.base).unwrap();
        let coarse = one_step_drift(&cfg, &st, big_n, 1e-2, 1_000_000);
        let fine = one_step_drift(&cfg, &st, big_n, 2.5e-3, 1_000_000);
        for (k, f) in frame_battery().iter().enumerate() {
            let want = frame_generator_apply(f, &st, &jet, big_n).unwrap();
            let ((c, sc), (fi, sf)) = (coarse[k], fine[k]);
            let rich = (4.0 * fi - c) / 3.0;
            let se = (16.0 * sf * sf + sc * sc).sqrt() / 3.0;
            assert!(
                (rich - want).abs() <= 3.0 * se + 1e-9,
                "{} psi {k}: extrapolated {rich} vs {want} (stderr {se})",
                cfg.background.label()
            );
            assert!((fi - want).abs() <= (c - want).abs() + 3.0 * (sc + sf) + 1e-9, "bias grew as h shrank");
        }
    }
}

// Euler on the torus clock dτ = (1+1/N)ds + 2√(τ/N)dB has an exact mean and
// a variance short by 2(1+1/N)s h/N.
#[test]
fn torus_clock_variance_has_first_order_weak_error() {
    let cfg = FlowConfig::torus_default();
    let start = ChartPoint::new(vec![0.0, 0.0], 0.2, ChartId::Periodic);
    let (big_n, s) = (100u64, 0.4);
    let nf = big_n as f64;
    let b = 1.0 + 1.0 / nf;
    let exact = 4.0 / nf * (0.2 * s + b * s * s / 2.0);
    let mut bias = vec![];
    for h in [0.1, 0.05] {
        let spec = SimSpec::new(s, h, 1_000_000).final_only();
        let rows = simulate_base_observe(&PerelmanModel::new(&cfg, big_n), &start, &spec, &RngSpec::new(9), |pv| {
            vec![pv.last().tau]
        })
        .unwrap();
        let mean = estimate(&column(&rows, 0)).unwrap();
        assert!((mean.mean - (0.2 + b * s)).abs() <= 3.0 * mean.stderr);
        let var = variance_estimate(&column(&rows, 0)).unwrap();
        let discrete = exact - 2.0 * b * s * h / nf;
        assert!((var.mean - discrete).abs() <= 3.0 * var.stderr, "h = {h}: {} vs {discrete}", var.mean);
        bias.push((var.mean - exact, var.stderr));
    }
    let ratio = bias[0].0 / bias[1].0;
    assert!((1.6..=2.4).contains(&ratio), "bias ratio {ratio}");
}

#[test]
fn worker_count_does_not_change_ensembles() {
    let cfg = FlowConfig::sphere_default();
    let p = ChartPoint::new(vec![0.3, -0.2], 0.04, ChartId::North);
    let st = generic_state(&cfg, p.clone());
    let spec = SimSpec::new(0.1, 1e-3, 64).saving_every(10);
    let rng = RngSpec::new(77);
    let model = PerelmanModel::new(&cfg, 100);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let base = simulate_base_paths(&model, &p, &spec, &rng).unwrap();
            let frames = simulate_frame_paths(&model, &st, &spec, &rng).unwrap();
            let mut a = vec![];
            base.write_csv(&mut a).unwrap();
            frames.write_csv(&mut a).unwrap();
            a
        })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn ensemble_dump_columns() {
    let cfg = FlowConfig::torus_default();
    let p = ChartPoint::new(vec![0.1, 0.2], 0.1, ChartId::Periodic);
    let st = FrameState::included(p, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let ens = simulate_frame_paths(&PerelmanModel::new(&cfg, 50), &st, &SimSpec::new(0.02, 0.01, 2), &RngSpec::new(1))
        .unwrap();
    let mut out = vec![];
    ens.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("path_id,s,x0,x1,tau,chart,e_00,"));
    assert!(header.ends_with("e_22,stopped"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}
