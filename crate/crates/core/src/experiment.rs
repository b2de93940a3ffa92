//! Parameter sweeps, the random baseline and placement profiles.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{run, SolverConfig, Trace};
use crate::cost::{check_feasibility, utility, Branch, Constraint, Placement, SplitAllocation, UtilityWeights};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::scenario::{generate_scenario, Scenario, ScenarioConfig, StationKind};

/// Draw rounds before the baseline gives up on a deadline-infeasible task.
pub const BASELINE_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Rho,
    NTasks,
    /// Compute capacity of every SBS, cycles/s.
    SbsCapacity,
    /// Compute capacity of the local terminal, cycles/s.
    LtCapacity,
    /// Data size of every task, bits.
    DataSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub alpha: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub parallelism: usize,
    pub seed: u64,
    pub record_time: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::<f64>::default();
        Self {
            alpha: d.alpha,
            rho: d.rho,
            max_iter: d.max_iter,
            tol: d.tol_primal,
            parallelism: d.parallelism,
            seed: d.seed,
            record_time: d.record_time,
        }
    }
}

impl SolverSettings {
    pub fn config(&self) -> SolverConfig<f64> {
        SolverConfig {
            alpha: self.alpha,
            rho: self.rho,
            max_iter: self.max_iter,
            tol_primal: self.tol,
            tol_dual: self.tol,
            parallelism: self.parallelism,
            seed: self.seed,
            record_time: self.record_time,
            ..SolverConfig::default()
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Directory name under `out_dir`.
    pub name: String,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    /// Scenario JSON used instead of generating from `scenario`.
    #[serde(default)]
    pub scenario_file: Option<PathBuf>,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Runs per value; repetition `r` generates with seed `scenario.seed + r`.
    #[serde(default = "one")]
    pub repetitions: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Random-baseline seeds per run; 0 skips the baseline table.
    #[serde(default)]
    pub baseline_seeds: usize,
    /// Concurrent sweep points; 0 uses the global pool.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must be nonempty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        let mut parts = Path::new(&self.name).components();
        if !matches!((parts.next(), parts.next()), (Some(std::path::Component::Normal(_)), None)) {
            return Err(Error::Config(format!("experiment name {:?} must be a plain directory name", self.name)));
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Alpha => (0.0..=1.0).contains(&v),
                SweepAxis::NTasks => v >= 1.0 && v.fract() == 0.0,
                _ => v > 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("value {v} invalid for axis {:?}", self.axis)));
            }
        }
        self.solver.config().validate()
    }

    fn base_scenario(&self, rep: usize) -> Result<Scenario<f64>> {
        match &self.scenario_file {
            Some(path) => Scenario::from_json(&fs::read_to_string(path)?),
            None => {
                let cfg = ScenarioConfig { seed: self.scenario.seed + rep as u64, ..self.scenario.clone() };
                generate_scenario(&cfg)
            }
        }
    }

    /// Scenario of one sweep point.
    pub fn point_scenario(&self, value: f64, rep: usize) -> Result<Scenario<f64>> {
        if self.axis == SweepAxis::NTasks {
            let n = value as usize;
            if self.scenario_file.is_some() {
                let base = self.base_scenario(rep)?;
                if n > base.n_tasks() {
                    return Err(Error::Config(format!("scenario file has fewer than {n} tasks")));
                }
                return base.subset(&(0..n).collect::<Vec<_>>());
            }
            let cfg = ScenarioConfig { n_tasks: n, seed: self.scenario.seed + rep as u64, ..self.scenario.clone() };
            return generate_scenario(&cfg);
        }
        let mut sc = self.base_scenario(rep)?;
        apply_axis(&mut sc, self.axis, value);
        Ok(sc)
    }

    pub fn point_config(&self, value: f64) -> SolverConfig<f64> {
        let mut cfg = self.solver.config();
        match self.axis {
            SweepAxis::Alpha => cfg.alpha = value,
            SweepAxis::Rho => cfg.rho = value,
            _ => {}
        }
        cfg
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn trace_path(&self, value: f64, rep: usize) -> PathBuf {
        let dir = self.experiment_dir().join(format!("{value}"));
        if self.repetitions > 1 {
            dir.join(format!("rep-{rep}")).join("trace.csv")
        } else {
            dir.join("trace.csv")
        }
    }
}

/// Scenario edits of the capacity and data-size axes; the others leave it untouched.
pub fn apply_axis(sc: &mut Scenario<f64>, axis: SweepAxis, value: f64) {
    match axis {
        SweepAxis::SbsCapacity => {
            for st in sc.stations.iter_mut().filter(|s| s.kind == StationKind::Sbs) {
                st.f = value;
            }
        }
        SweepAxis::LtCapacity => sc.device.f_local = value,
        SweepAxis::DataSize => {
            for t in sc.tasks.iter_mut() {
                t.c = value;
            }
        }
        SweepAxis::Alpha | SweepAxis::Rho | SweepAxis::NTasks => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BranchCounts {
    pub local: usize,
    pub sbs: usize,
    pub mbs: usize,
}

pub fn branch_counts<T: Real>(p: &Placement<T>) -> BranchCounts {
    let mut c = BranchCounts::default();
    for j in 0..p.z.len() {
        match p.hard_branch(j) {
            Some(Branch::Local) => c.local += 1,
            Some(Branch::Mbs) => c.mbs += 1,
            Some(Branch::Sbs(_)) => c.sbs += 1,
            None => {}
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    /// NaN when the solver failed on this point.
    pub final_utility: f64,
    pub iters: usize,
    pub converged: bool,
    pub n_local: usize,
    pub n_sbs: usize,
    pub n_mbs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub sweep_value: f64,
    pub solver_utility: f64,
    pub baseline_mean: f64,
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Seeds that produced a feasible placement.
    pub feasible_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub value: f64,
    pub rep: usize,
    pub summary: SummaryRow,
    pub trace: Trace,
    pub placement: Option<Placement<f64>>,
    pub baseline: Option<BaselineRow>,
}

/// Solves one sweep point; solver failures become a flagged row.
pub fn run_point(spec: &ExperimentSpec, value: f64, rep: usize) -> Result<PointOutcome> {
    let sc = spec.point_scenario(value, rep)?;
    let cfg = spec.point_config(value);
    let (summary, trace, placement) = match run(&sc, &cfg) {
        Ok(out) => {
            let c = branch_counts(&out.placement);
            let row = SummaryRow {
                sweep_value: value,
                final_utility: out.utility,
                iters: out.trace.records.len(),
                converged: out.converged,
                n_local: c.local,
                n_sbs: c.sbs,
                n_mbs: c.mbs,
            };
            (row, out.trace, Some(out.placement))
        }
        Err(Error::InfeasibleTask(_) | Error::StalledLineSearch(_) | Error::InfeasibleRate { .. }) => {
            let row = SummaryRow {
                sweep_value: value,
                final_utility: f64::NAN,
                iters: 0,
                converged: false,
                n_local: 0,
                n_sbs: 0,
                n_mbs: 0,
            };
            (row, Trace::default(), None)
        }
        Err(e) => return Err(e),
    };
    let baseline = if spec.baseline_seeds > 0 {
        let w = UtilityWeights::new(cfg.alpha)?;
        let us: Vec<f64> = (0..spec.baseline_seeds as u64)
            .filter_map(|s| run_baseline(&sc, w, cfg.seed.wrapping_add(s)).ok().map(|(_, u)| u))
            .collect();
        let n = us.len().max(1) as f64;
        Some(BaselineRow {
            sweep_value: value,
            solver_utility: summary.final_utility,
            baseline_mean: if us.is_empty() { f64::NAN } else { us.iter().sum::<f64>() / n },
            baseline_min: us.iter().copied().fold(f64::NAN, f64::min),
            baseline_max: us.iter().copied().fold(f64::NAN, f64::max),
            feasible_seeds: us.len(),
        })
    } else {
        None
    };
    Ok(PointOutcome { value, rep, summary, trace, placement, baseline })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub points: Vec<PointOutcome>,
    pub summary_path: PathBuf,
    pub baseline_path: Option<PathBuf>,
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every `(value, repetition)` point and writes traces, `summary.csv`
/// and, with baseline seeds, `baseline.csv` under `<out_dir>/<name>/`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let dir = spec.experiment_dir();
    fs::create_dir_all(&dir)?;
    let jobs: Vec<(f64, usize)> =
        spec.values.iter().flat_map(|&v| (0..spec.repetitions).map(move |r| (v, r))).collect();
    let work = || -> Result<Vec<PointOutcome>> {
        jobs.par_iter()
            .map(|&(v, r)| {
                let out = run_point(spec, v, r)?;
                let path = spec.trace_path(v, r);
                fs::create_dir_all(path.parent().expect("trace path has a parent"))?;
                out.trace.write_csv(fs::File::create(&path)?)?;
                Ok(out)
            })
            .collect()
    };
    let points = if spec.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?
    } else {
        work()?
    };
    let summary_path = dir.join("summary.csv");
    write_rows(&summary_path, points.iter().map(|p| &p.summary))?;
    let baseline_path = if spec.baseline_seeds > 0 {
        let path = dir.join("baseline.csv");
        write_rows(&path, points.iter().filter_map(|p| p.baseline.as_ref()))?;
        Some(path)
    } else {
        None
    };
    Ok(ExperimentReport { points, summary_path, baseline_path })
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn random_branch(rng: &mut ChaCha8Rng, n_sbs: usize) -> Branch {
    match rng.gen_range(0..n_sbs + 2) {
        0 => Branch::Local,
        1 => Branch::Mbs,
        i => Branch::Sbs(i - 1),
    }
}

/// Hard placement with `c/3` splits and equal shares on every SBS.
fn even_placement<T: Real>(scenario: &Scenario<T>, branches: &[Branch]) -> Placement<T> {
    let splits: Vec<Option<SplitAllocation<T>>> = branches
        .iter()
        .enumerate()
        .map(|(j, b)| match *b {
            Branch::Sbs(i) => {
                let m = branches.iter().filter(|&&o| o == Branch::Sbs(i)).count();
                let mut sp = SplitAllocation::even(scenario.tasks[j].c, scenario.h_min);
                sp.set_h((T::one() / T::from_usize(m).unwrap()).max(scenario.h_min));
                Some(sp)
            }
            _ => None,
        })
        .collect();
    Placement::from_branches(scenario, branches, &splits)
}

/// Uniformly random branch per task, redrawing the tasks that miss a
/// deadline or overfill an SBS until the placement is feasible.
pub fn run_baseline<T: Real>(
    scenario: &Scenario<T>,
    weights: UtilityWeights<T>,
    seed: u64,
) -> Result<(Placement<T>, T)> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = scenario.n_sbs();
    let mut branches: Vec<Branch> = (0..scenario.n_tasks()).map(|_| random_branch(&mut rng, s)).collect();
    let mut last = Vec::new();
    for _ in 0..BASELINE_RETRIES {
        let p = even_placement(scenario, &branches);
        let violations = check_feasibility(scenario, &p, 1e-9)?;
        if violations.is_empty() {
            let u = utility(&p, scenario, weights)?;
            return Ok((p, u));
        }
        let mut redraw: Vec<usize> = Vec::new();
        for v in &violations {
            match (v.constraint, v.task, v.station) {
                (_, Some(j), _) => redraw.push(j),
                (Constraint::Capacity, None, Some(i)) => {
                    redraw.extend((0..branches.len()).filter(|&j| branches[j] == Branch::Sbs(i)));
                }
                _ => {}
            }
        }
        redraw.sort_unstable();
        redraw.dedup();
        for &j in &redraw {
            branches[j] = random_branch(&mut rng, s);
        }
        last = redraw;
    }
    Err(Error::InfeasibleTask(last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub data_size: f64,
    pub branch: Branch,
    pub c0_frac: f64,
    pub ci_frac: f64,
    pub c1_frac: f64,
    pub utility: f64,
}

/// Solves task 0 of `scenario` alone at every data size and reports the
/// chosen branch with its split fractions.
pub fn placement_profile(scenario: &Scenario<f64>, sizes: &[f64], cfg: &SolverConfig<f64>) -> Result<Vec<ProfileRow>> {
    let single = scenario.subset(&[0])?;
    sizes
        .iter()
        .map(|&size| {
            let mut sc = single.clone();
            sc.tasks[0].c = size;
            let out = run(&sc, cfg)?;
            let branch = out.placement.hard_branch(0).ok_or(Error::InfeasibleTask(vec![0]))?;
            let (c0, ci, c1) = match branch {
                Branch::Local => (size, 0.0, 0.0),
                Branch::Mbs => (0.0, 0.0, size),
                Branch::Sbs(i) => {
                    let sp = out.placement.split[i - 1][0];
                    (sp.c0, sp.ci, sp.c1)
                }
            };
            Ok(ProfileRow {
                data_size: size,
                branch,
                c0_frac: c0 / size,
                ci_frac: ci / size,
                c1_frac: c1 / size,
                utility: out.utility,
            })
        })
        .collect()
}
