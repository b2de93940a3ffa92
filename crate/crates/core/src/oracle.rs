//! Exhaustive search over hard placements for small instances.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::cost::{
    check_feasibility, interference, local_cost, mbs_cost, relay_models, sbs_rate, three_tier_cost, utility, Branch,
    BranchCost, Placement, SplitAllocation, ThreeTierLink, UtilityWeights, Violation,
};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::rounding::water_fill;
use crate::scenario::{QuadraticDelay, Scenario};

pub const MAX_TASKS: usize = 6;
pub const MAX_STATIONS: usize = 4;

/// Coarsest grid; finer searches are warm-started from the half resolution.
const BASE_RESOLUTION: usize = 8;
const ZOOM_LEVELS: usize = 3;
const ZOOM_POINTS: usize = 10;
const MAX_SWEEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRow<T> {
    pub task: usize,
    pub branch: Branch,
    pub c0: T,
    pub ci: T,
    pub c1: T,
    pub h: T,
    pub delay: T,
    pub energy: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult<T> {
    pub placement: Placement<T>,
    pub utility: T,
    pub branches: Vec<TaskRow<T>>,
    /// Branch tuples visited, feasible or not.
    pub enumerated: usize,
}

/// Deadline excess first, weighted cost second.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Score<T> {
    excess: T,
    cost: T,
}

impl<T: Real> Score<T> {
    fn better(&self, other: &Self) -> bool {
        match self.excess.partial_cmp(&other.excess) {
            Some(Ordering::Less) => true,
            Some(Ordering::Equal) => self.cost < other.cost,
            _ => false,
        }
    }

    fn feasible(&self) -> bool {
        self.excess == T::zero()
    }
}

/// Tasks sharing one SBS under a fixed branch tuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    sbs: usize,
    members: Vec<usize>,
    /// `(task, station)` of every task on another SBS, which fixes interference.
    others: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct GroupSolution<T> {
    cost: T,
    /// `(c0, c1, h)` per member.
    parts: Vec<(T, T, T)>,
    costs: Vec<BranchCost<T>>,
}

struct Group<'a, T> {
    scenario: &'a Scenario<T>,
    weights: UtilityWeights<T>,
    sbs: usize,
    members: &'a [usize],
    rates: Vec<T>,
    relay: QuadraticDelay<T>,
}

impl<'a, T: Real> Group<'a, T> {
    fn member_costs(&self, parts: &[(T, T, T)]) -> Option<Vec<BranchCost<T>>> {
        let load: T = parts.iter().map(|p| p.1).sum();
        let wired = self.relay.delay(load);
        self.members
            .iter()
            .zip(parts)
            .zip(&self.rates)
            .map(|((&j, &(c0, c1, h)), &rate)| {
                let task = &self.scenario.tasks[j];
                let sp = SplitAllocation::new(c0, (task.c - c0 - c1).max(T::zero()), c1, h, self.scenario.h_min);
                three_tier_cost(task, self.sbs, &sp, self.scenario, &ThreeTierLink { rate, wired_delay: wired }).ok()
            })
            .collect()
    }

    fn score(&self, parts: &[(T, T, T)]) -> Score<T> {
        let Some(costs) = self.member_costs(parts) else {
            return Score { excess: T::infinity(), cost: T::infinity() };
        };
        let mut excess = T::zero();
        let mut cost = T::zero();
        for (&j, c) in self.members.iter().zip(&costs) {
            let t = self.scenario.tasks[j].t_max;
            excess = excess + ((c.delay - t) / t).max(T::zero());
            cost = cost + c.weighted(self.weights);
        }
        Score { excess, cost }
    }

    /// Best `(c0, c1)` of member `m` on a simplex grid, then zoomed around the winner.
    fn split_step(&self, parts: &mut [(T, T, T)], m: usize, resolution: usize) -> bool {
        let c = self.scenario.tasks[self.members[m]].c;
        let mut best = self.score(parts);
        let mut improved = false;
        let mut trial = parts.to_vec();
        let mut try_point = |c0: T, c1: T, best: &mut Score<T>, parts: &mut [(T, T, T)]| {
            if c0 < T::zero() || c1 < T::zero() || c0 + c1 > c {
                return false;
            }
            trial[m] = (c0, c1, parts[m].2);
            let s = self.score(&trial);
            if s.better(best) {
                *best = s;
                parts[m] = trial[m];
                return true;
            }
            false
        };
        let n = T::from_usize(resolution).unwrap();
        for a in 0..=resolution {
            for b in 0..=resolution - a {
                let c0 = c * T::from_usize(a).unwrap() / n;
                let c1 = c * T::from_usize(b).unwrap() / n;
                improved |= try_point(c0, c1, &mut best, parts);
            }
        }
        let mut step = c / n;
        let half = T::from_usize(ZOOM_POINTS).unwrap();
        for _ in 0..ZOOM_LEVELS {
            let (c0, c1) = (parts[m].0, parts[m].1);
            let fine = step / half;
            for a in 0..=2 * ZOOM_POINTS {
                for b in 0..=2 * ZOOM_POINTS {
                    let da = T::from_usize(a).unwrap() - half;
                    let db = T::from_usize(b).unwrap() - half;
                    improved |= try_point(c0 + da * fine, c1 + db * fine, &mut best, parts);
                }
            }
            // the simplex faces themselves, where the optimum often sits
            for a in 0..=2 * ZOOM_POINTS {
                let d = (T::from_usize(a).unwrap() - half) * fine;
                improved |= try_point(T::zero(), c1 + d, &mut best, parts);
                improved |= try_point(c0 + d, T::zero(), &mut best, parts);
                improved |= try_point(c0 + d, c - c0 - d, &mut best, parts);
            }
            step = fine;
        }
        improved
    }

    /// Optimal shares for fixed splits: deadline floors, then water-filling of the SBS term.
    fn share_step(&self, parts: &mut [(T, T, T)]) -> bool {
        let Some(costs) = self.member_costs(parts) else { return false };
        let hmin = self.scenario.h_min;
        let f = self.scenario.stations[self.sbs].f;
        let mut floors = Vec::with_capacity(parts.len());
        let mut weights = Vec::with_capacity(parts.len());
        for ((&j, &(c0, c1, h)), cost) in self.members.iter().zip(parts.iter()).zip(&costs) {
            let task = &self.scenario.tasks[j];
            let edge_cycles = (task.c - c0 - c1).max(T::zero()) * task.u;
            let rest = cost.delay - edge_cycles / (h * f);
            let slack = task.t_max - rest;
            let floor = if edge_cycles == T::zero() {
                hmin
            } else if slack > T::zero() {
                (edge_cycles / (f * slack)).max(hmin)
            } else {
                return false;
            };
            floors.push(floor);
            weights.push(self.weights.alpha * edge_cycles / f);
        }
        if floors.iter().copied().sum::<T>() > T::one() {
            return false;
        }
        let h = water_fill(&weights, &floors);
        let mut trial = parts.to_vec();
        for (p, &hj) in trial.iter_mut().zip(&h) {
            p.2 = hj.clamp_to(hmin, T::one());
        }
        if self.score(&trial).better(&self.score(parts)) {
            parts.copy_from_slice(&trial);
            return true;
        }
        false
    }

    fn search(&self, mut parts: Vec<(T, T, T)>, resolution: usize) -> Vec<(T, T, T)> {
        for _ in 0..MAX_SWEEPS {
            let mut improved = false;
            for m in 0..parts.len() {
                improved |= self.split_step(&mut parts, m, resolution);
            }
            improved |= self.share_step(&mut parts);
            if !improved {
                break;
            }
        }
        parts
    }

    /// Search at `resolution`, warm-started from the result at half resolution so
    /// that doubling the resolution never worsens the result.
    fn solve_at(&self, resolution: usize) -> Vec<(T, T, T)> {
        let start = if resolution >= 2 * BASE_RESOLUTION {
            self.solve_at(resolution / 2)
        } else {
            let h = (T::one() / T::from_usize(self.members.len()).unwrap()).max(self.scenario.h_min);
            vec![(T::zero(), T::zero(), h); self.members.len()]
        };
        self.search(start, resolution)
    }

    fn solve(&self, resolution: usize) -> Option<GroupSolution<T>> {
        let m = T::from_usize(self.members.len()).unwrap();
        if m * self.scenario.h_min > T::one() + T::lit(1e-12) {
            return None;
        }
        let parts = self.solve_at(resolution);
        let score = self.score(&parts);
        if !score.feasible() {
            return None;
        }
        let costs = self.member_costs(&parts)?;
        Some(GroupSolution { cost: score.cost, parts, costs })
    }
}

fn sbs_matrix(n_sbs: usize, tuple: &[Branch]) -> Vec<Vec<f64>> {
    let mut x = vec![vec![0.0; tuple.len()]; n_sbs];
    for (j, b) in tuple.iter().enumerate() {
        if let Branch::Sbs(i) = *b {
            x[i - 1][j] = 1.0;
        }
    }
    x
}

fn group_keys(n_sbs: usize, tuple: &[Branch]) -> Vec<GroupKey> {
    (1..=n_sbs)
        .filter_map(|i| {
            let members: Vec<usize> = (0..tuple.len()).filter(|&j| tuple[j] == Branch::Sbs(i)).collect();
            if members.is_empty() {
                return None;
            }
            let others = tuple
                .iter()
                .enumerate()
                .filter_map(|(j, b)| match *b {
                    Branch::Sbs(k) if k != i => Some((j, k)),
                    _ => None,
                })
                .collect();
            Some(GroupKey { sbs: i, members, others })
        })
        .collect()
}

/// Mixed-radix decoding of tuple `index` over `[Local, Mbs, Sbs(1)..]`.
fn decode(mut index: usize, n_tasks: usize, n_sbs: usize) -> Vec<Branch> {
    let radix = n_sbs + 2;
    (0..n_tasks)
        .map(|_| {
            let d = index % radix;
            index /= radix;
            match d {
                0 => Branch::Local,
                1 => Branch::Mbs,
                i => Branch::Sbs(i - 1),
            }
        })
        .collect()
}

fn weighted_if_on_time<T: Real>(c: BranchCost<T>, t_max: T, w: UtilityWeights<T>) -> Option<T> {
    (c.delay <= t_max).then(|| c.weighted(w))
}

/// Global optimum of the hard problem over every branch tuple.
///
/// Three-tier splits are searched on a simplex grid with `grid_resolution`
/// cells per task, zoomed around the best cell, alternated with the exact
/// share allocation of each SBS.
pub fn enumerate_optimum<T: Real>(
    scenario: &Scenario<T>,
    weights: UtilityWeights<T>,
    grid_resolution: usize,
) -> Result<OracleResult<T>> {
    scenario.validate()?;
    let n = scenario.n_tasks();
    let s = scenario.n_sbs();
    if n > MAX_TASKS || scenario.stations.len() > MAX_STATIONS {
        return Err(Error::TooLarge(format!(
            "{n} tasks and {} stations exceed {MAX_TASKS} and {MAX_STATIONS}",
            scenario.stations.len()
        )));
    }
    if grid_resolution == 0 {
        return Err(Error::Config("grid_resolution must be >= 1".into()));
    }
    let relay = relay_models(scenario)?;
    let direct: Vec<(Option<T>, Option<T>)> = scenario
        .tasks
        .iter()
        .map(|t| {
            let local = weighted_if_on_time(local_cost(t, &scenario.device), t.t_max, weights);
            let mbs = mbs_cost(t, scenario).ok().and_then(|c| weighted_if_on_time(c, t.t_max, weights));
            (local, mbs)
        })
        .collect();
    let total = (s + 2).checked_pow(n as u32).ok_or_else(|| Error::TooLarge("tuple count overflows".into()))?;

    let direct_ok = |tuple: &[Branch]| {
        tuple.iter().enumerate().all(|(j, b)| match b {
            Branch::Local => direct[j].0.is_some(),
            Branch::Mbs => direct[j].1.is_some(),
            Branch::Sbs(_) => true,
        })
    };
    let mut keys = BTreeMap::new();
    for idx in 0..total {
        let tuple = decode(idx, n, s);
        if direct_ok(&tuple) {
            for k in group_keys(s, &tuple) {
                keys.insert(k, ());
            }
        }
    }
    let keys: Vec<GroupKey> = keys.into_keys().collect();
    let solved: Vec<Option<GroupSolution<T>>> = keys
        .par_iter()
        .map(|key| {
            let mut tuple = vec![Branch::Local; n];
            for &j in &key.members {
                tuple[j] = Branch::Sbs(key.sbs);
            }
            for &(j, k) in &key.others {
                tuple[j] = Branch::Sbs(k);
            }
            let x: Vec<Vec<T>> =
                sbs_matrix(s, &tuple).iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect();
            let rates = key
                .members
                .iter()
                .map(|&j| sbs_rate(scenario, key.sbs, j, interference(scenario, &x, key.sbs, j)).ok())
                .collect::<Option<Vec<T>>>()?;
            Group { scenario, weights, sbs: key.sbs, members: &key.members, rates, relay: relay[key.sbs - 1] }
                .solve(grid_resolution)
        })
        .collect();
    let table: BTreeMap<&GroupKey, &Option<GroupSolution<T>>> = keys.iter().zip(&solved).collect();

    let mut best: Option<(T, Vec<Branch>)> = None;
    for idx in 0..total {
        let tuple = decode(idx, n, s);
        if !direct_ok(&tuple) {
            continue;
        }
        let mut cost = T::zero();
        for (j, b) in tuple.iter().enumerate() {
            match b {
                Branch::Local => cost = cost + direct[j].0.unwrap(),
                Branch::Mbs => cost = cost + direct[j].1.unwrap(),
                Branch::Sbs(_) => {}
            }
        }
        let mut feasible = true;
        for k in group_keys(s, &tuple) {
            match table[&k] {
                Some(g) => cost = cost + g.cost,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible && best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, tuple));
        }
    }
    let Some((_, tuple)) = best else {
        return Err(Error::InfeasibleTask((0..n).collect()));
    };

    let mut splits: Vec<Option<SplitAllocation<T>>> = vec![None; n];
    let mut rows: Vec<Option<TaskRow<T>>> = vec![None; n];
    for k in group_keys(s, &tuple) {
        let g = table[&k].as_ref().expect("chosen tuple has solved groups");
        for ((&j, &(c0, c1, h)), c) in k.members.iter().zip(&g.parts).zip(&g.costs) {
            let ci = (scenario.tasks[j].c - c0 - c1).max(T::zero());
            splits[j] = Some(SplitAllocation::new(c0, ci, c1, h, scenario.h_min));
            rows[j] = Some(TaskRow { task: j, branch: tuple[j], c0, ci, c1, h, delay: c.delay, energy: c.energy });
        }
    }
    for (j, b) in tuple.iter().enumerate() {
        let task = &scenario.tasks[j];
        let c = match b {
            Branch::Local => local_cost(task, &scenario.device),
            Branch::Mbs => mbs_cost(task, scenario)?,
            Branch::Sbs(_) => continue,
        };
        rows[j] = Some(TaskRow {
            task: j,
            branch: *b,
            c0: T::zero(),
            ci: T::zero(),
            c1: T::zero(),
            h: T::zero(),
            delay: c.delay,
            energy: c.energy,
        });
    }
    let placement = Placement::from_branches(scenario, &tuple, &splits);
    let u = utility(&placement, scenario, weights)?;
    Ok(OracleResult { placement, utility: u, branches: rows.into_iter().map(Option::unwrap).collect(), enumerated: total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// `(solver - oracle) / |oracle|`.
    pub gap_rel: f64,
    pub agreement: usize,
    pub n_tasks: usize,
    pub solver_violations: Vec<Violation>,
    pub oracle_violations: Vec<Violation>,
    pub within_tolerance: bool,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.within_tolerance && self.solver_violations.is_empty()
    }
}

pub fn compare<T: Real>(
    scenario: &Scenario<T>,
    solver: &Placement<T>,
    solver_utility: T,
    oracle: &OracleResult<T>,
    tol_rel: f64,
) -> Result<ComparisonReport> {
    let o = oracle.utility.as_f64();
    let gap_rel = (solver_utility.as_f64() - o) / o.abs().max(f64::MIN_POSITIVE);
    let agreement = oracle.branches.iter().filter(|row| solver.hard_branch(row.task) == Some(row.branch)).count();
    Ok(ComparisonReport {
        gap_rel,
        agreement,
        n_tasks: scenario.n_tasks(),
        solver_violations: check_feasibility(scenario, solver, 1e-9)?,
        oracle_violations: check_feasibility(scenario, &oracle.placement, 1e-9)?,
        // boundary counts as a pass despite the rounding of the quotient
        within_tolerance: gap_rel <= tol_rel * (1.0 + 1e-9) + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small(n_tasks: usize, n_sbs: usize, seed: u64) -> Scenario<f64> {
        generate_scenario(&ScenarioConfig { n_tasks, n_sbs, seed, ..ScenarioConfig::default() }).unwrap()
    }

    fn w(alpha: f64) -> UtilityWeights<f64> {
        UtilityWeights::new(alpha).unwrap()
    }

    #[test]
    fn small_task_goes_local() {
        let sc = small(1, 1, 3);
        let r = enumerate_optimum(&sc, w(0.5), 20).unwrap();
        assert_eq!(r.branches[0].branch, Branch::Local);
        assert_eq!(r.placement.z[0], 1.0);
        // hand comparison against the direct MBS branch
        let t = &sc.tasks[0];
        assert!(local_cost(t, &sc.device).weighted(w(0.5)) < mbs_cost(t, &sc).unwrap().weighted(w(0.5)));
    }

    #[test]
    fn only_mbs_meets_deadline() {
        let mut sc = small(1, 1, 3);
        // local takes 0.036 s, MBS under 1 ms, SBS at best a few ms
        sc.tasks[0].t_max = 0.002;
        sc.stations[1].f = 1e6;
        let r = enumerate_optimum(&sc, w(0.5), 10).unwrap();
        assert_eq!(r.branches[0].branch, Branch::Mbs);
        assert_eq!(r.placement.y[0], 1.0);
    }

    #[test]
    fn capacity_admits_one_task() {
        let mut sc = small(2, 1, 5);
        sc.h_min = 0.6;
        // make the SBS attractive: local too slow, MBS expensive
        sc.device.f_local = 1e6;
        sc.stations[0].e_cycle = 1e-6;
        let r = enumerate_optimum(&sc, w(0.5), 10).unwrap();
        let on_sbs = r.branches.iter().filter(|row| matches!(row.branch, Branch::Sbs(_))).count();
        assert_eq!(on_sbs, 1);
        assert!(check_feasibility(&sc, &r.placement, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn rejects_large_instances() {
        assert!(matches!(enumerate_optimum(&small(7, 1, 1), w(0.5), 4), Err(Error::TooLarge(_))));
        assert!(matches!(enumerate_optimum(&small(2, 4, 1), w(0.5), 4), Err(Error::TooLarge(_))));
    }

    #[test]
    fn no_feasible_tuple() {
        let mut sc = small(1, 1, 2);
        sc.tasks[0].t_max = 1e-9;
        assert!(matches!(enumerate_optimum(&sc, w(0.5), 4), Err(Error::InfeasibleTask(_))));
    }

    #[test]
    fn mid_size_task_splits_three_ways() {
        let mut sc = small(1, 1, 11);
        sc.tasks[0].c = 1e7;
        sc.tasks[0].t_max = 30.0;
        let r = enumerate_optimum(&sc, w(0.5), 40).unwrap();
        let row = &r.branches[0];
        assert!(matches!(row.branch, Branch::Sbs(1)), "{row:?}");
        assert!(row.c0 > 0.0 && row.ci > 0.0, "{row:?}");
    }

    #[test]
    fn compare_semantics() {
        let sc = small(2, 1, 4);
        let r = enumerate_optimum(&sc, w(0.5), 8).unwrap();
        let same = compare(&sc, &r.placement, r.utility, &r, 0.0).unwrap();
        assert_eq!(same.gap_rel, 0.0);
        assert_eq!(same.agreement, 2);
        assert!(same.passed());
        let edge = compare(&sc, &r.placement, r.utility * 1.05, &r, 0.05).unwrap();
        assert!(edge.passed(), "{}", edge.gap_rel);
        assert!(!compare(&sc, &r.placement, r.utility * 1.06, &r, 0.05).unwrap().passed());
        let mut bad = r.placement.clone();
        bad.z[0] = 0.0;
        bad.y[0] = 0.0;
        let rep = compare(&sc, &bad, r.utility, &r, 0.05).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.solver_violations[0].constraint, crate::cost::Constraint::Assignment);
    }

    /// Random hard placement with random splits and shares summing to at most one.
    fn random_placement(sc: &Scenario<f64>, rng: &mut impl Rng) -> Placement<f64> {
        let n = sc.n_tasks();
        let s = sc.n_sbs();
        let branches: Vec<Branch> = (0..n)
            .map(|_| match rng.gen_range(0..s + 2) {
                0 => Branch::Local,
                1 => Branch::Mbs,
                i => Branch::Sbs(i - 1),
            })
            .collect();
        let mut splits = vec![None; n];
        for i in 1..=s {
            let m: Vec<usize> = (0..n).filter(|&j| branches[j] == Branch::Sbs(i)).collect();
            let raw: Vec<f64> = m.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum::<f64>().max(1.0);
            for (&j, r) in m.iter().zip(&raw) {
                let c = sc.tasks[j].c;
                let a: f64 = rng.gen_range(0.0..1.0);
                let b: f64 = rng.gen_range(0.0..1.0 - a);
                let h = (r / total).max(sc.h_min);
                splits[j] = Some(SplitAllocation::new(a * c, (1.0 - a - b) * c, b * c, h, sc.h_min));
            }
        }
        Placement::from_branches(sc, &branches, &splits)
    }

    #[test]
    fn beats_random_feasible_placements() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for seed in 0..3 {
            let mut sc = small(3, 2, seed);
            sc.h_min = 0.2;
            for t in sc.tasks.iter_mut() {
                t.c *= 300.0;
            }
            let r = enumerate_optimum(&sc, w(0.5), 16).unwrap();
            let mut checked = 0;
            for _ in 0..1000 {
                let p = random_placement(&sc, &mut rng);
                if !check_feasibility(&sc, &p, 0.0).unwrap().is_empty() {
                    continue;
                }
                checked += 1;
                let u = utility(&p, &sc, w(0.5)).unwrap();
                assert!(r.utility <= u * (1.0 + 1e-12), "{} > {u}", r.utility);
            }
            assert!(checked > 100, "{checked}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn refining_never_worsens(seed in 0u64..1000, alpha in 0.1f64..0.9) {
            let mut sc = small(2, 1, seed);
            for t in sc.tasks.iter_mut() {
                t.c *= 500.0;
            }
            let coarse = enumerate_optimum(&sc, w(alpha), 8).unwrap();
            let fine = enumerate_optimum(&sc, w(alpha), 16).unwrap();
            prop_assert!(fine.utility <= coarse.utility * (1.0 + 1e-12));
        }
    }
}
