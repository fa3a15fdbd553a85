use clap::{Parser, Subcommand};
use rflab::config::{parse_config, RunConfig, Scenario};
use rflab::scenario::run_scenario;
use rflab::LabError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rflab", version, about = "Perelman-manifold Brownian motion against its N -> infinity limit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write results.csv, summary.json, resolved.config.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// ricci-validate, curvature-check, operator-check, scalar-convergence,
    /// frame-convergence, cylinder-convergence, gradient-estimate or all
    scenario: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Path count for every Monte Carlo experiment.
    #[arg(long)]
    paths: Option<usize>,
    /// Integrator step h.
    #[arg(long)]
    step: Option<f64>,
    /// Comma-separated N grid, e.g. 100,1000,10000.
    #[arg(long = "N-list", value_delimiter = ',')]
    n_list: Option<Vec<u64>>,
    /// sphere, torus or both.
    #[arg(long)]
    background: Option<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Also dump sample path ensembles as CSV.
    #[arg(long)]
    dump_ensemble: bool,
}

fn resolve(args: RunArgs) -> Result<RunConfig, LabError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| LabError::Io { path: p.display().to_string(), msg: e.to_string() })?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    cfg.scenario = args.scenario.parse::<Scenario>()?;
    if let Some(b) = &args.background {
        // reuse the file parser so both routes accept the same spellings
        cfg.selection = parse_config(&format!("[run]\nbackground = {b}\n"))?.selection;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if args.paths.is_some() {
        cfg.n_paths = args.paths;
    }
    if args.step.is_some() {
        cfg.step = args.step;
    }
    if args.n_list.is_some() {
        cfg.n_list = args.n_list;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    cfg.dump_ensemble |= args.dump_ensemble;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;
    let cfg = match resolve(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("rflab: {e}");
            return ExitCode::from(2);
        }
    };
    match run_scenario(&cfg) {
        Ok(true) => {
            println!("all checks passed, outputs in {}", cfg.out_dir.display());
            ExitCode::SUCCESS
        }
        Ok(false) => {
            println!("some checks failed, see {}", cfg.out_dir.join("summary.json").display());
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("rflab: {e}");
            ExitCode::from(2)
        }
    }
}
