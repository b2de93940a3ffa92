//! Multi-block consensus ADMM over the local and global blocks.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::cost::{
    interference, local_cost, mbs_cost, relay_models, sbs_rate, task_branch_costs, three_tier_delay, utility, BranchCost,
    CostContext, Placement, SplitAllocation, ThreeTierLink, UtilityWeights,
};
use crate::error::{Error, Result};
use crate::global::{GlobalConfig, TaskGlobalProblem};
use crate::local::{solve_local_block, solve_mbs_block, BlockState, CbgpConfig, ConsensusSlot, ThreeTierBlock};
use crate::num::Real;
use crate::rounding::round_to_feasible;
use crate::scenario::{QuadraticDelay, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub rho: T,
    pub max_iter: usize,
    pub tol_primal: T,
    pub tol_dual: T,
    pub alpha: T,
    /// Worker threads for the per-task blocks; 0 uses the global pool.
    pub parallelism: usize,
    pub seed: u64,
    pub cbgp: CbgpConfig<T>,
    pub global: GlobalConfig<T>,
    /// Record wall-clock milliseconds in the trace; when off the column is 0.
    pub record_time: bool,
    /// Multiplier applied to every cost inside the blocks. `None` scales each
    /// task so that its cheapest direct branch costs one, which amounts to a
    /// per-task penalty parameter.
    pub cost_scale: Option<T>,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            rho: T::one(),
            max_iter: 200,
            tol_primal: T::lit(1e-4),
            tol_dual: T::lit(1e-4),
            alpha: T::lit(0.5),
            parallelism: 0,
            seed: 42,
            cbgp: CbgpConfig::default(),
            global: GlobalConfig::default(),
            record_time: true,
            cost_scale: None,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > T::zero()) {
            return Err(Error::Config("rho must be > 0".into()));
        }
        if !(self.tol_primal > T::zero() && self.tol_dual > T::zero()) {
            return Err(Error::Config("tolerances must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        UtilityWeights::new(self.alpha)?;
        Ok(())
    }
}

/// Global variables, local copies and duals. SBS rows use slot `k = station - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState<T> {
    pub x: Vec<Vec<T>>,
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub x_local: Vec<Vec<T>>,
    pub y_local: Vec<T>,
    pub z_local: Vec<T>,
    pub dual_x: Vec<Vec<T>>,
    /// Dual of `ẑ - z`.
    pub beta: Vec<T>,
    /// Dual of `ŷ - y`.
    pub gamma: Vec<T>,
    /// Local three-tier splits.
    pub split: Vec<Vec<SplitAllocation<T>>>,
    pub rho: T,
    pub k: usize,
}

impl<T: Real> ConsensusState<T> {
    /// Uniform relaxed start with zero duals and even splits.
    pub fn initial(scenario: &Scenario<T>, rho: T) -> Self {
        let p = Placement::uniform(scenario);
        let n = scenario.n_tasks();
        let s = scenario.n_sbs();
        Self {
            x_local: p.x.clone(),
            y_local: p.y.clone(),
            z_local: p.z.clone(),
            x: p.x,
            y: p.y,
            z: p.z,
            dual_x: vec![vec![T::zero(); n]; s],
            beta: vec![T::zero(); n],
            gamma: vec![T::zero(); n],
            split: p.split,
            rho,
            k: 0,
        }
    }

    pub fn globals(&self) -> Vec<T> {
        self.x.iter().flatten().chain(&self.y).chain(&self.z).copied().collect()
    }

    pub fn locals(&self) -> Vec<T> {
        self.x_local.iter().flatten().chain(&self.y_local).chain(&self.z_local).copied().collect()
    }

    /// Relaxed placement at the global variables with the local splits.
    pub fn relaxed_placement(&self) -> Placement<T> {
        Placement { z: self.z.clone(), y: self.y.clone(), x: self.x.clone(), split: self.split.clone() }
    }
}

/// `dual + ρ (local - global)`.
pub fn dual_step<T: Real>(dual: T, rho: T, local: T, global: T) -> T {
    dual + rho * (local - global)
}

pub fn dual_update<T: Real>(st: &mut ConsensusState<T>) {
    let rho = st.rho;
    for ((d, l), g) in st.dual_x.iter_mut().flatten().zip(st.x_local.iter().flatten()).zip(st.x.iter().flatten()) {
        *d = dual_step(*d, rho, *l, *g);
    }
    for j in 0..st.y.len() {
        st.gamma[j] = dual_step(st.gamma[j], rho, st.y_local[j], st.y[j]);
        st.beta[j] = dual_step(st.beta[j], rho, st.z_local[j], st.z[j]);
    }
}

/// Primal residual `‖local - global‖` and dual residual `ρ‖global - previous‖`.
pub fn residuals<T: Real>(local: &[T], global: &[T], previous: &[T], rho: T) -> (T, T) {
    let p = local.iter().zip(global).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    let d = global.iter().zip(previous).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    (p, rho * d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub utility: f64,
    pub primal_res: f64,
    pub dual_res: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.iter < r.iter));
        self.records.push(r);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        if self.records.is_empty() {
            wr.write_record(["iter", "utility", "primal_res", "dual_res", "wall_ms"])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    /// Rounded, feasible placement.
    pub placement: Placement<T>,
    /// Utility of `placement`.
    pub utility: T,
    pub state: ConsensusState<T>,
    pub trace: Trace,
    /// Residual tolerances met before `max_iter`.
    pub converged: bool,
    /// Augmented Lagrangian after every iteration.
    pub augmented: Vec<T>,
    /// Per-task cost multiplier used inside the blocks.
    pub cost_scale: Vec<T>,
}

/// Per-task constants of the direct branches.
struct DirectCosts<T> {
    local: BranchCost<T>,
    mbs: Option<BranchCost<T>>,
}

fn direct_costs<T: Real>(scenario: &Scenario<T>) -> Vec<DirectCosts<T>> {
    scenario
        .tasks
        .iter()
        .map(|t| DirectCosts { local: local_cost(t, &scenario.device), mbs: mbs_cost(t, scenario).ok() })
        .collect()
}

/// Per-task normalizer making the cheaper direct branch cost one.
pub fn auto_cost_scale<T: Real>(scenario: &Scenario<T>, weights: UtilityWeights<T>) -> Vec<T> {
    direct_costs(scenario)
        .iter()
        .map(|c| {
            let l = c.local.weighted(weights);
            let m = c.mbs.map_or(l, |m| l.min(m.weighted(weights)));
            if m > T::zero() && m.is_finite() {
                T::one() / m
            } else {
                T::one()
            }
        })
        .collect()
}

/// Share of SBS `k` granted to task `j` in proportion to `√c` over the
/// tasks currently assigned there.
pub fn resource_share<T: Real>(scenario: &Scenario<T>, x_row: &[T], j: usize) -> T {
    let own = scenario.tasks[j].c.sqrt();
    let others: T = x_row
        .iter()
        .enumerate()
        .filter(|&(jp, _)| jp != j)
        .map(|(jp, &x)| x * scenario.tasks[jp].c.sqrt())
        .sum();
    let h = if own + others > T::zero() { own / (own + others) } else { T::one() };
    h.clamp_to(scenario.h_min, T::one())
}

/// Frozen per-iteration quantities shared by all local blocks.
struct Snapshot<T> {
    rate: Vec<Vec<Option<T>>>,
    relay: Vec<QuadraticDelay<T>>,
    relay_load: Vec<T>,
    r: Vec<Vec<T>>,
}

impl<T: Real> Snapshot<T> {
    fn new(scenario: &Scenario<T>, st: &ConsensusState<T>, relay: &[QuadraticDelay<T>]) -> Self {
        let n = scenario.n_tasks();
        let rate = scenario
            .sbs_ids()
            .map(|i| (0..n).map(|j| sbs_rate(scenario, i, j, interference(scenario, &st.x, i, j)).ok()).collect())
            .collect();
        let relay_load = st.x.iter().zip(&st.split).map(|(xr, sr)| xr.iter().zip(sr).map(|(&x, s)| x * s.c1).sum()).collect();
        let r = st.x.iter().map(|xr| (0..n).map(|j| T::one() / resource_share(scenario, xr, j)).collect()).collect();
        Self { rate, relay: relay.to_vec(), relay_load, r }
    }
}

/// Output of the local blocks of one task.
struct TaskLocal<T> {
    x: Vec<T>,
    split: Vec<SplitAllocation<T>>,
    y: T,
    z: T,
}

struct Engine<'a, T> {
    scenario: &'a Scenario<T>,
    cfg: &'a SolverConfig<T>,
    weights: UtilityWeights<T>,
    scale: Vec<T>,
    direct: Vec<DirectCosts<T>>,
    relay: Vec<QuadraticDelay<T>>,
}

impl<'a, T: Real> Engine<'a, T> {
    fn block(&self, snap: &Snapshot<T>, st: &ConsensusState<T>, k: usize, j: usize) -> Option<ThreeTierBlock<T>> {
        let rate = snap.rate[k][j]?;
        let own = st.x[k][j] * st.split[k][j].c1;
        Some(ThreeTierBlock::new(
            self.scenario,
            k + 1,
            &self.scenario.tasks[j],
            rate,
            snap.relay[k],
            (snap.relay_load[k] - own).max(T::zero()),
            self.weights,
            self.scale[j],
            st.rho,
            st.dual_x[k][j],
            st.x[k][j],
            snap.r[k][j],
            self.cfg.cbgp.delta,
        ))
    }

    fn solve_locals(&self, snap: &Snapshot<T>, st: &ConsensusState<T>, j: usize) -> TaskLocal<T> {
        let s = self.scenario.n_sbs();
        let mut x = Vec::with_capacity(s);
        let mut split = Vec::with_capacity(s);
        for k in 0..s {
            let prev = st.split[k][j];
            match self.block(snap, st, k, j) {
                Some(b) => {
                    let xl = st.x_local[k][j];
                    let init = BlockState { xhat: xl, c0: prev.c0, c1: prev.c1, rr: xl * b.r };
                    let out = b.solve(init, &self.cfg.cbgp);
                    x.push(out.state.primal.xhat);
                    split.push(out.split);
                }
                None => {
                    x.push(T::zero());
                    split.push(prev);
                }
            }
        }
        let task = &self.scenario.tasks[j];
        let z = solve_local_block(task, self.scenario, ConsensusSlot { global: st.z[j], dual: st.beta[j] }, st.rho, self.weights, self.scale[j]);
        let y = solve_mbs_block(task, self.scenario, ConsensusSlot { global: st.y[j], dual: st.gamma[j] }, st.rho, self.weights, self.scale[j]);
        TaskLocal { x, split, y, z }
    }

    /// Delay of each branch of task `j` in global-variable order `[x.., y, z]`.
    fn branch_delays(&self, snap: &Snapshot<T>, st: &ConsensusState<T>, j: usize) -> Vec<T> {
        let task = &self.scenario.tasks[j];
        let mut d: Vec<T> = (0..self.scenario.n_sbs())
            .map(|k| match snap.rate[k][j] {
                Some(rate) => {
                    let mut sp = st.split[k][j];
                    sp.set_h(T::one() / snap.r[k][j]);
                    let own = st.x[k][j] * sp.c1;
                    let load = (snap.relay_load[k] - own).max(T::zero()) + sp.c1;
                    let link = ThreeTierLink { rate, wired_delay: snap.relay[k].delay(load) };
                    three_tier_delay(task, &self.scenario.stations[k + 1], &sp, self.scenario, &link)
                        .unwrap_or(T::infinity())
                }
                None => T::infinity(),
            })
            .collect();
        d.push(self.direct[j].mbs.map_or(T::infinity(), |c| c.delay));
        d.push(self.direct[j].local.delay);
        d
    }

    fn solve_global(&self, snap: &Snapshot<T>, st: &ConsensusState<T>, j: usize) -> Vec<T> {
        let s = self.scenario.n_sbs();
        let mut local: Vec<T> = (0..s).map(|k| st.x_local[k][j]).collect();
        local.push(st.y_local[j]);
        local.push(st.z_local[j]);
        let mut dual: Vec<T> = (0..s).map(|k| st.dual_x[k][j]).collect();
        dual.push(st.gamma[j]);
        dual.push(st.beta[j]);
        let p = TaskGlobalProblem::new(local, dual, self.branch_delays(snap, st, j), self.scenario.tasks[j].t_max, st.rho);
        p.solve(&self.cfg.global).state.v
    }

    /// Augmented Lagrangian at the current local copies, globals and duals.
    fn augmented_lagrangian(&self, st: &ConsensusState<T>) -> T {
        let rho = st.rho;
        let pen = |l: T, g: T, d: T| d * (l - g) + rho / T::lit(2.0) * (l - g) * (l - g);
        let mut total = T::zero();
        for j in 0..self.scenario.n_tasks() {
            let dc = &self.direct[j];
            total = total + self.scale[j] * st.z_local[j] * dc.local.weighted(self.weights);
            if let Some(m) = dc.mbs {
                total = total + self.scale[j] * st.y_local[j] * m.weighted(self.weights);
            }
            total = total + pen(st.z_local[j], st.z[j], st.beta[j]) + pen(st.y_local[j], st.y[j], st.gamma[j]);
            for k in 0..self.scenario.n_sbs() {
                total = total + pen(st.x_local[k][j], st.x[k][j], st.dual_x[k][j]);
            }
        }
        let local = Placement { z: vec![T::zero(); st.z.len()], y: vec![T::zero(); st.y.len()], x: st.x_local.clone(), split: st.split.clone() };
        let Ok(ctx) = CostContext::new(self.scenario, &local) else { return T::infinity() };
        for j in 0..self.scenario.n_tasks() {
            let Ok((_, _, sbs)) = task_branch_costs(self.scenario, &local, &ctx, j) else { return T::infinity() };
            for (k, c) in sbs.iter().enumerate() {
                if local.x[k][j] != T::zero() {
                    total = total + self.scale[j] * local.x[k][j] * c.weighted(self.weights);
                }
            }
        }
        total
    }

    fn iterate(&self, st: &mut ConsensusState<T>) -> (T, T) {
        let n = self.scenario.n_tasks();
        let s = self.scenario.n_sbs();
        let snap = Snapshot::new(self.scenario, st, &self.relay);
        let locals: Vec<TaskLocal<T>> = (0..n).into_par_iter().map(|j| self.solve_locals(&snap, st, j)).collect();
        for (j, tl) in locals.into_iter().enumerate() {
            for k in 0..s {
                st.x_local[k][j] = tl.x[k];
                st.split[k][j] = tl.split[k];
            }
            st.y_local[j] = tl.y;
            st.z_local[j] = tl.z;
        }
        let previous = st.globals();
        let snap = Snapshot::new(self.scenario, st, &self.relay);
        let globals: Vec<Vec<T>> = (0..n).into_par_iter().map(|j| self.solve_global(&snap, st, j)).collect();
        for (j, v) in globals.into_iter().enumerate() {
            for k in 0..s {
                st.x[k][j] = v[k];
            }
            st.y[j] = v[s];
            st.z[j] = v[s + 1];
        }
        dual_update(st);
        st.k += 1;
        residuals(&st.locals(), &st.globals(), &previous, st.rho)
    }
}

/// Runs consensus ADMM, then rounds the relaxed solution to a feasible placement.
pub fn run<T: Real>(scenario: &Scenario<T>, cfg: &SolverConfig<T>) -> Result<RunOutcome<T>> {
    scenario.validate()?;
    cfg.validate()?;
    if cfg.parallelism > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_inner(scenario, cfg))
    } else {
        run_inner(scenario, cfg)
    }
}

fn run_inner<T: Real>(scenario: &Scenario<T>, cfg: &SolverConfig<T>) -> Result<RunOutcome<T>> {
    let weights = UtilityWeights::new(cfg.alpha)?;
    let scale = match cfg.cost_scale {
        Some(s) => vec![s; scenario.n_tasks()],
        None => auto_cost_scale(scenario, weights),
    };
    let engine = Engine {
        scenario,
        cfg,
        weights,
        scale: scale.clone(),
        direct: direct_costs(scenario),
        relay: relay_models(scenario)?,
    };
    let start = Instant::now();
    let mut st = ConsensusState::initial(scenario, cfg.rho);
    let mut trace = Trace::default();
    let mut augmented = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let (pr, dr) = engine.iterate(&mut st);
        let u = utility(&st.relaxed_placement(), scenario, weights)?;
        augmented.push(engine.augmented_lagrangian(&st));
        trace.push(TraceRecord {
            iter: st.k,
            utility: u.as_f64(),
            primal_res: pr.as_f64(),
            dual_res: dr.as_f64(),
            wall_ms: if cfg.record_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        });
        if pr < cfg.tol_primal && dr < cfg.tol_dual {
            converged = true;
            break;
        }
    }
    let placement = round_to_feasible(&st, scenario, weights, &scale, &cfg.cbgp)?;
    let u = utility(&placement, scenario, weights)?;
    Ok(RunOutcome { placement, utility: u, state: st, trace, converged, augmented, cost_scale: scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::Branch;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    #[test]
    fn dual_update_examples() {
        assert_eq!(dual_step::<f64>(0.5, 1.0, 0.3, 0.3), 0.5);
        assert!((dual_step::<f64>(0.5, 1.0, 0.7, 0.5) - 0.7).abs() < 1e-15);
        assert!((dual_step::<f64>(0.0, 1.2, 0.4, 0.5) + 0.12).abs() < 1e-15);
    }

    #[test]
    fn dual_update_is_linear() {
        let (g1, g2, rho): (f64, f64, f64) = (0.13, -0.42, 1.3);
        let twice = dual_step(dual_step(0.2, rho, g1, 0.0), rho, g2, 0.0);
        let once = dual_step(0.2, rho, g1 + g2, 0.0);
        assert!((twice - once).abs() < 1e-15);
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residuals(&[0.2, 0.4], &[0.2, 0.4], &[0.2, 0.4], 1.0), (0.0, 0.0));
        let (p, _) = residuals::<f64>(&[0.3, 0.0, 0.0], &[0.0, 0.0, 0.0], &[0.0; 3], 1.0);
        assert!((p - 0.3).abs() < 1e-15);
        let (_, d) = residuals::<f64>(&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.0], 2.0);
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn trace_csv_header() {
        let mut t = Trace::default();
        assert!(t.to_csv_string().unwrap().starts_with("iter,utility,primal_res,dual_res,wall_ms"));
        t.push(TraceRecord { iter: 1, utility: 2.5, primal_res: 0.1, dual_res: 0.0, wall_ms: 0.0 });
        let s = t.to_csv_string().unwrap();
        assert_eq!(s, "iter,utility,primal_res,dual_res,wall_ms\n1,2.5,0.1,0.0,0.0\n");
    }

    #[test]
    fn single_small_task_runs_locally() {
        let cfg = ScenarioConfig { n_tasks: 1, n_sbs: 1, c_range: [100.0, 100.0], ..Default::default() };
        let s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        let out = run(&s, &SolverConfig::default()).unwrap();
        assert_eq!(out.placement.hard_branch(0), Some(Branch::Local));
    }

    #[test]
    fn initial_state_is_uniform() {
        let s: Scenario<f64> = generate_scenario(&ScenarioConfig { n_tasks: 2, n_sbs: 4, ..Default::default() }).unwrap();
        let st = ConsensusState::initial(&s, 1.0);
        assert!(st.globals().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(st.split.iter().flatten().all(|sp| sp.h == 1.0 && (sp.c0 - sp.ci).abs() < 1e-9));
    }
}
