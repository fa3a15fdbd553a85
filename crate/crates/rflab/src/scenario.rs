//! Named scenarios: default experiment plans, overrides and artifacts.

use crate::backgrounds::FlowConfig;
use crate::config::{Background, RunConfig, Scenario};
use crate::error::{LabError, Result};
use crate::lab::{
    christoffel_check, cylinder_battery, cylinder_convergence_experiment, frame_concentration_experiment,
    gradient_battery, gradient_estimate_experiment, martingale_residual_experiment, operator_check,
    ricci_scaling_check, ricci_validate, scalar_defect_check, time_marginal_experiment, CylinderParams,
    ExperimentReport, FrameParams, GradientParams, MarginalParams, MartingaleParams, McParams,
    OperatorCheckParams,
};
use crate::output::{write_outputs, ScenarioOutcome};
use crate::reference::parabolic_base_paths;
use crate::rng::RngSpec;
use crate::sde::{simulate_base_paths, PerelmanModel, SimSpec};
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

const SMALL_N: [usize; 3] = [2, 4, 8];
const DEFECT_GRID: [u64; 4] = [1000, 2000, 4000, 8000];
const DUMP_PATHS: usize = 100;
const DUMP_ROWS_PER_PATH: usize = 100;

/// Seed of experiment block `tag`, derived from the master seed only.
pub fn block_seed(master: u64, tag: u64) -> u64 {
    RngSpec::new(master).derive(tag).master_seed
}

fn tag(scenario: Scenario, bg: usize, block: u64) -> u64 {
    let s = Scenario::SEQUENCE.iter().position(|&c| c == scenario).unwrap_or(99) as u64;
    s * 1000 + bg as u64 * 100 + block
}

struct Plan<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
}

impl Plan<'_> {
    fn mc(&self, bg: usize, block: u64, n_paths: usize, step: f64) -> McParams {
        McParams {
            n_paths: self.cfg.n_paths.unwrap_or(n_paths),
            step: self.cfg.step.unwrap_or(step),
            seed: block_seed(self.cfg.seed, tag(self.scenario, bg, block)),
        }
    }

    fn grid(&self, default: &[u64]) -> Vec<u64> {
        self.cfg.n_list.clone().unwrap_or_else(|| default.to_vec())
    }

    fn flows(&self) -> Vec<FlowConfig> {
        self.cfg.backgrounds().iter().map(|b| b.flow.clone()).collect()
    }
}

fn scalar_convergence(plan: &Plan, bg: &Background, i: usize) -> Result<Vec<ExperimentReport>> {
    let sphere = bg.flow.is_sphere();
    let (s_list, grid) = if sphere {
        (vec![0.05, 0.1, 0.2], plan.grid(&[100, 1000, 10_000]))
    } else {
        (vec![0.5], plan.grid(&[100, 1000]))
    };
    let marginal = MarginalParams { s_list, n_grid: grid, mc: plan.mc(i, 0, 10_000, 1e-3) };
    let mut mp = MartingaleParams::defaults(&bg.flow, plan.mc(i, 1, 10_000, 1e-3));
    if let Some(l) = &plan.cfg.n_list {
        mp.n_grid = l.clone();
    }
    if plan.cfg.dump_ensemble {
        dump_ensembles(plan, bg, &marginal)?;
    }
    Ok(vec![
        time_marginal_experiment(&bg.flow, &bg.start, &marginal)?,
        martingale_residual_experiment(&bg.flow, &bg.start, &mp)?,
    ])
}

/// Perelman paths at the largest N and parabolic paths, same seed, up to
/// the longest marginal horizon.
fn dump_ensembles(plan: &Plan, bg: &Background, p: &MarginalParams) -> Result<()> {
    let horizon = p.s_list.iter().copied().fold(0.0, f64::max);
    let steps = (horizon / p.mc.step).round().max(1.0) as usize;
    let spec = SimSpec::new(horizon, p.mc.step, p.mc.n_paths.min(DUMP_PATHS))
        .saving_every((steps / DUMP_ROWS_PER_PATH).max(1));
    let rng = RngSpec::new(p.mc.seed);
    let big_n = p.n_grid.iter().copied().max().unwrap_or(1);
    let label = bg.flow.background.label();
    let dir = &plan.cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| LabError::Io { path: dir.display().to_string(), msg: e.to_string() })?;
    let ensembles = [
        (format!("ensemble_perelman_N{big_n}_{label}.csv"), simulate_base_paths(&PerelmanModel::new(&bg.flow, big_n), &bg.start, &spec, &rng)?),
        (format!("ensemble_parabolic_{label}.csv"), parabolic_base_paths(&bg.flow, &bg.start, &spec, &rng)?),
    ];
    for (name, ens) in ensembles {
        let path: PathBuf = dir.join(name);
        let io = |e: std::io::Error| LabError::Io { path: path.display().to_string(), msg: e.to_string() };
        let file = fs::File::create(&path).map_err(io)?;
        ens.write_csv(BufWriter::new(file)).map_err(io)?;
    }
    Ok(())
}

fn frame_convergence(plan: &Plan, bg: &Background, i: usize) -> Result<ExperimentReport> {
    let (s, grid) = if bg.flow.is_sphere() { (0.3, [1000, 4000]) } else { (0.5, [1000, 4000]) };
    let p = FrameParams { s, n_grid: plan.grid(&grid), mc: plan.mc(i, 0, 2000, 1e-3), control_defect: 0.5 };
    frame_concentration_experiment(&bg.flow, &bg.start, &p)
}

fn cylinder_convergence(plan: &Plan, bg: &Background, i: usize) -> Result<ExperimentReport> {
    let p = CylinderParams {
        cases: cylinder_battery(&bg.flow, &bg.start),
        n_grid: plan.grid(&[100, 1000, 10_000]),
        mc: plan.mc(i, 0, 10_000, 1e-3),
    };
    cylinder_convergence_experiment(&bg.flow, &bg.start, &p)
}

fn gradient_estimate(plan: &Plan, bg: &Background, i: usize) -> Result<ExperimentReport> {
    // the torus is flat, so only the clock feels the step and a coarse one is exact enough
    let (mc, super_rf_s) =
        if bg.flow.is_sphere() { (plan.mc(i, 0, 20_000, 1e-3), 0.1) } else { (plan.mc(i, 0, 1_000_000, 0.05), 0.5) };
    let p = GradientParams {
        cases: gradient_battery(&bg.flow),
        mc,
        displacement: 1e-3,
        super_rf_points: 50,
        super_rf_paths: 2000,
        super_rf_s,
    };
    gradient_estimate_experiment(&bg.flow, &bg.start, &p)
}

/// Reports of one concrete scenario on the selected backgrounds.
pub fn run_one(scenario: Scenario, cfg: &RunConfig) -> Result<Vec<ExperimentReport>> {
    let plan = Plan { cfg, scenario };
    let bgs = cfg.backgrounds();
    let per_background = |f: &dyn Fn(&Background, usize) -> Result<Vec<ExperimentReport>>| -> Result<Vec<ExperimentReport>> {
        let mut out = vec![];
        for (i, bg) in bgs.iter().enumerate() {
            out.extend(f(bg, i)?);
        }
        Ok(out)
    };
    match scenario {
        Scenario::RicciValidate => Ok(vec![ricci_validate(&plan.flows())?]),
        Scenario::CurvatureCheck => {
            let mut out = vec![christoffel_check(&plan.flows(), &SMALL_N, 20)?];
            for bg in bgs.iter().filter(|b| b.flow.is_sphere()) {
                out.push(ricci_scaling_check(&bg.flow, &SMALL_N, 20)?);
            }
            Ok(out)
        }
        Scenario::OperatorCheck => {
            let flows = plan.flows();
            let params = OperatorCheckParams {
                n_grid: plan.grid(&DEFECT_GRID),
                seed: block_seed(cfg.seed, tag(scenario, 0, 0)),
                ..OperatorCheckParams::default()
            };
            Ok(vec![scalar_defect_check(&flows, &plan.grid(&DEFECT_GRID), 20)?, operator_check(&flows, &params)?])
        }
        Scenario::ScalarConvergence => per_background(&|bg, i| scalar_convergence(&plan, bg, i)),
        Scenario::FrameConvergence => per_background(&|bg, i| frame_convergence(&plan, bg, i).map(|r| vec![r])),
        Scenario::CylinderConvergence => per_background(&|bg, i| cylinder_convergence(&plan, bg, i).map(|r| vec![r])),
        Scenario::GradientEstimate => per_background(&|bg, i| gradient_estimate(&plan, bg, i).map(|r| vec![r])),
        Scenario::All => Err(LabError::Contract("`all` is expanded before running".into())),
    }
}

/// Run every scenario `cfg.scenario` expands to. Module errors end up in
/// the outcome instead of aborting the remaining scenarios.
pub fn run_scenarios(cfg: &RunConfig) -> Vec<ScenarioOutcome> {
    cfg.scenario
        .expand()
        .into_iter()
        .map(|sc| {
            let t = Instant::now();
            let res = run_one(sc, cfg);
            let runtime_s = t.elapsed().as_secs_f64();
            match res {
                Ok(reports) => ScenarioOutcome { scenario: sc.name().into(), runtime_s, reports, error: None },
                Err(e) => ScenarioOutcome { scenario: sc.name().into(), runtime_s, reports: vec![], error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Run on a pool of `cfg.workers` threads (0: rayon's default), write the
/// artifacts, and return whether every check passed.
pub fn run_scenario(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let outcomes = if cfg.workers == 0 {
        run_scenarios(cfg)
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| LabError::Config(format!("worker pool: {e}")))?
            .install(|| run_scenarios(cfg))
    };
    write_outputs(&outcomes, &cfg.resolved_text(), &cfg.out_dir)?;
    Ok(outcomes.iter().all(ScenarioOutcome::passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_seeds_differ_and_repeat() {
        let a = block_seed(1, tag(Scenario::CylinderConvergence, 0, 0));
        assert_eq!(a, block_seed(1, tag(Scenario::CylinderConvergence, 0, 0)));
        assert_ne!(a, block_seed(1, tag(Scenario::CylinderConvergence, 1, 0)));
        assert_ne!(a, block_seed(2, tag(Scenario::CylinderConvergence, 0, 0)));
    }

    #[test]
    fn all_is_rejected_by_run_one() {
        assert!(run_one(Scenario::All, &RunConfig::default()).is_err());
    }
}
