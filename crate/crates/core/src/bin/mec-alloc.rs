use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mec_alloc::admm::{run, SolverConfig};
use mec_alloc::cost::{Placement, UtilityWeights};
use mec_alloc::experiment::{branch_counts, placement_profile, run_baseline, run_experiment, BranchCounts, ExperimentSpec};
use mec_alloc::oracle::enumerate_optimum;
use mec_alloc::scenario::{generate_scenario, Scenario, ScenarioConfig};
use mec_alloc::Result;

#[derive(Parser)]
#[command(name = "mec-alloc", version, about = "Task allocation across local terminals, small cells and a macro cell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run consensus ADMM on a scenario; writes trace.csv and placement.json.
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Worker threads for the per-task blocks; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        parallelism: usize,
        /// Write 0 in the wall_ms column so traces are reproducible byte for byte.
        #[arg(long)]
        no_time: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive optimum of a small scenario, written as JSON.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Grid cells per task along each split coordinate.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a parameter sweep described by a JSON spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Random feasible placement; prints its utility and branch counts as JSON.
    Baseline {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a scenario from a JSON config (defaults when omitted).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        n_sbs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Branch and split of task 0 solved alone at each data size, as CSV.
    Profile {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Data sizes in bits.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct SolveReport<'a> {
    utility: f64,
    converged: bool,
    iterations: usize,
    counts: BranchCounts,
    placement: &'a Placement<f64>,
}

fn load(path: &Path) -> Result<Scenario<f64>> {
    Scenario::from_json(&fs::read_to_string(path)?)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Solve { scenario, alpha, rho, max_iter, tol, seed, parallelism, no_time, out } => {
            let sc = load(&scenario)?;
            let cfg = SolverConfig {
                alpha,
                rho,
                max_iter,
                tol_primal: tol,
                tol_dual: tol,
                seed,
                parallelism,
                record_time: !no_time,
                ..SolverConfig::default()
            };
            let res = run(&sc, &cfg)?;
            fs::create_dir_all(&out)?;
            res.trace.write_csv(fs::File::create(out.join("trace.csv"))?)?;
            let report = SolveReport {
                utility: res.utility,
                converged: res.converged,
                iterations: res.trace.records.len(),
                counts: branch_counts(&res.placement),
                placement: &res.placement,
            };
            fs::write(out.join("placement.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "utility {:.6} after {} iterations ({})",
                res.utility,
                report.iterations,
                if res.converged { "converged" } else { "not converged" }
            );
        }
        Command::Oracle { scenario, alpha, grid, out } => {
            let sc = load(&scenario)?;
            let r = enumerate_optimum(&sc, UtilityWeights::new(alpha)?, grid)?;
            fs::write(&out, serde_json::to_string_pretty(&r)?)?;
            println!("optimum {:.6} over {} branch tuples", r.utility, r.enumerated);
        }
        Command::Sweep { spec } => {
            let spec = ExperimentSpec::from_json(&fs::read_to_string(spec)?)?;
            let rep = run_experiment(&spec)?;
            println!("{} runs, summary in {}", rep.points.len(), rep.summary_path.display());
        }
        Command::Baseline { scenario, alpha, seed } => {
            let sc = load(&scenario)?;
            let (p, u) = run_baseline(&sc, UtilityWeights::new(alpha)?, seed)?;
            let out = serde_json::json!({ "seed": seed, "utility": u, "counts": branch_counts(&p) });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Generate { config, n_tasks, n_sbs, seed, out } => {
            let mut cfg: ScenarioConfig = match config {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => ScenarioConfig::default(),
            };
            cfg.n_tasks = n_tasks.unwrap_or(cfg.n_tasks);
            cfg.n_sbs = n_sbs.unwrap_or(cfg.n_sbs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let sc: Scenario<f64> = generate_scenario(&cfg)?;
            fs::write(&out, sc.to_json()?)?;
        }
        Command::Profile { scenario, alpha, sizes, out } => {
            let sc = load(&scenario)?;
            let cfg = SolverConfig { alpha, record_time: false, ..SolverConfig::default() };
            let rows = placement_profile(&sc, &sizes, &cfg)?;
            let mut w = csv::Writer::from_path(&out)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
