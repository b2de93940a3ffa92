//! Rounding a relaxed consensus state to a feasible hard placement.

use crate::admm::ConsensusState;
use crate::cost::{
    check_feasibility, interference, local_cost, mbs_cost, relay_models, sbs_rate, three_tier_cost, utility, Branch, Constraint,
    Placement, SplitAllocation, ThreeTierLink, UtilityWeights,
};
use crate::error::{Error, Result};
use crate::local::{CbgpConfig, ThreeTierBlock};
use crate::num::Real;
use crate::scenario::{QuadraticDelay, Scenario};

const PASSES: usize = 10;
const SPLIT_ROUNDS: usize = 50;
/// Pair exchanges tried per polish pass.
const SWAP_LIMIT: usize = 256;

/// Shares `h_j = max(lb_j, λ√w_j)` summing to one (or to `Σ lb` if larger).
pub fn water_fill<T: Real>(weights: &[T], lower: &[T]) -> Vec<T> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let lb_sum: T = lower.iter().copied().sum();
    if lb_sum >= T::one() {
        return lower.to_vec();
    }
    let roots: Vec<T> = weights.iter().map(|w| w.max(T::zero()).sqrt()).collect();
    if roots.iter().all(|&r| r == T::zero()) {
        let extra = (T::one() - lb_sum) / T::from_usize(n).unwrap();
        return lower.iter().map(|&l| (l + extra).min(T::one())).collect();
    }
    let total = |lam: T| -> T { roots.iter().zip(lower).map(|(&r, &l)| l.max(lam * r).min(T::one())).sum() };
    let mut lo = T::zero();
    let mut hi = T::one();
    while total(hi) < T::one() && hi < T::lit(1e300) {
        hi = hi * T::lit(2.0);
    }
    for _ in 0..200 {
        let mid = (lo + hi) / T::lit(2.0);
        if total(mid) < T::one() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut h: Vec<T> = roots.iter().zip(lower).map(|(&r, &l)| l.max(hi * r).min(T::one())).collect();
    // absorb bisection error into the largest share
    let s: T = h.iter().copied().sum();
    if s > T::one() {
        if let Some(big) = (0..n).max_by(|&a, &b| h[a].partial_cmp(&h[b]).unwrap()) {
            h[big] = (h[big] - (s - T::one())).max(lower[big]);
        }
    }
    h
}

/// Mutable hard assignment during repair.
struct Repair<'a, T> {
    scenario: &'a Scenario<T>,
    weights: UtilityWeights<T>,
    scales: Vec<T>,
    relay: Vec<QuadraticDelay<T>>,
    branches: Vec<Branch>,
    splits: Vec<SplitAllocation<T>>,
    /// Relaxed weight of the chosen branch, used to pick demotions.
    strength: Vec<T>,
}

impl<'a, T: Real> Repair<'a, T> {
    fn members(&self, sbs: usize) -> Vec<usize> {
        (0..self.branches.len()).filter(|&j| self.branches[j] == Branch::Sbs(sbs)).collect()
    }

    fn x_matrix(&self) -> Vec<Vec<T>> {
        let n = self.branches.len();
        self.scenario
            .sbs_ids()
            .map(|i| (0..n).map(|j| if self.branches[j] == Branch::Sbs(i) { T::one() } else { T::zero() }).collect())
            .collect()
    }

    fn relay_load(&self, sbs: usize, except: usize) -> T {
        self.members(sbs).into_iter().filter(|&j| j != except).map(|j| self.splits[j].c1).sum()
    }

    fn block(&self, x: &[Vec<T>], sbs: usize, j: usize, h: T) -> Option<ThreeTierBlock<T>> {
        let rate = sbs_rate(self.scenario, sbs, j, interference(self.scenario, x, sbs, j)).ok()?;
        Some(ThreeTierBlock::new(
            self.scenario,
            sbs,
            &self.scenario.tasks[j],
            rate,
            self.relay[sbs - 1],
            self.relay_load(sbs, j),
            self.weights,
            self.scales[j],
            T::one(),
            T::zero(),
            T::one(),
            T::one() / h,
            T::zero(),
        ))
    }

    /// Demotes the weakest tasks while an SBS holds more than `1/h_min` of them.
    fn enforce_count(&mut self) {
        let cap = (T::one() / self.scenario.h_min).floor().to_usize().unwrap_or(usize::MAX).max(1);
        for i in self.scenario.sbs_ids() {
            let mut m = self.members(i);
            while m.len() > cap {
                let weakest = *m
                    .iter()
                    .min_by(|&&a, &&b| self.strength[a].partial_cmp(&self.strength[b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                self.branches[weakest] = Branch::Mbs;
                m.retain(|&j| j != weakest);
            }
        }
    }

    /// Smallest share meeting the deadline with the current split.
    fn share_floor(&self, x: &[Vec<T>], sbs: usize, j: usize) -> T {
        let Some(b) = self.block(x, sbs, j, T::one()) else { return T::infinity() };
        let sp = self.splits[j];
        let ci = (b.c - sp.c0 - sp.c1).max(T::zero());
        // delay at r = 0 excludes the SBS compute term
        let rest = ThreeTierBlock { r: T::zero(), ..b }.delay(sp.c0, sp.c1);
        let slack = b.t_max - rest;
        let need = if ci == T::zero() {
            T::zero()
        } else if slack > T::zero() {
            ci * b.u / (b.f_sbs * slack)
        } else {
            T::infinity()
        };
        // a split tuned onto the deadline at h = 1 lands a few ulps above one
        let need = if need > T::one() && need <= T::one() + T::lit(1e-9) { T::one() } else { need };
        need.max(self.scenario.h_min)
    }

    /// Assigns shares on every SBS, demoting tasks whose floors cannot fit.
    fn allocate(&mut self) -> bool {
        let mut changed = false;
        for i in self.scenario.sbs_ids() {
            loop {
                let x = self.x_matrix();
                let m = self.members(i);
                if m.is_empty() {
                    break;
                }
                let floors: Vec<T> = m.iter().map(|&j| self.share_floor(&x, i, j)).collect();
                let sum: T = floors.iter().copied().sum();
                // same slack as the capacity check
                if sum <= T::one() + T::lit(1e-9) {
                    let w: Vec<T> = m
                        .iter()
                        .map(|&j| {
                            let sp = self.splits[j];
                            self.weights.alpha * sp.ci * self.scenario.tasks[j].u / self.scenario.stations[i].f
                        })
                        .collect();
                    let h = water_fill(&w, &floors);
                    for (&j, &hj) in m.iter().zip(&h) {
                        self.splits[j].set_h(hj.clamp_to(self.scenario.h_min, T::one()));
                    }
                    break;
                }
                let worst = (0..m.len()).max_by(|&a, &b| floors[a].partial_cmp(&floors[b]).unwrap()).unwrap();
                self.branches[m[worst]] = Branch::Mbs;
                changed = true;
            }
        }
        changed
    }

    /// Re-optimizes every SBS task's split at its current share.
    fn optimize_splits(&mut self) {
        let x = self.x_matrix();
        for i in self.scenario.sbs_ids() {
            for j in self.members(i) {
                let sp = self.splits[j];
                if let Some(b) = self.block(&x, i, j, sp.h) {
                    let (c0, c1) = b.optimize_split(sp.c0, sp.c1, SPLIT_ROUNDS);
                    let h = sp.h;
                    self.splits[j] = SplitAllocation::new(c0, (b.c - c0 - c1).max(T::zero()), c1, h, self.scenario.h_min);
                }
            }
        }
    }

    fn placement(&self) -> Placement<T> {
        let splits: Vec<Option<SplitAllocation<T>>> = self.splits.iter().map(|s| Some(*s)).collect();
        Placement::from_branches(self.scenario, &self.branches, &splits)
    }

    /// Moves deadline violators to their fastest feasible branch.
    fn promote(&mut self) -> Result<bool> {
        let p = self.placement();
        let violations = check_feasibility(self.scenario, &p, 1e-9)?;
        let late: Vec<usize> = violations.iter().filter(|v| v.constraint == Constraint::Deadline).filter_map(|v| v.task).collect();
        if late.is_empty() {
            return Ok(false);
        }
        let x = self.x_matrix();
        for &j in &late {
            let task = &self.scenario.tasks[j];
            let mut options: Vec<(T, Branch, Option<SplitAllocation<T>>)> = Vec::new();
            options.push((local_cost(task, &self.scenario.device).delay, Branch::Local, None));
            if let Ok(c) = mbs_cost(task, self.scenario) {
                options.push((c.delay, Branch::Mbs, None));
            }
            for i in self.scenario.sbs_ids() {
                if self.branches[j] == Branch::Sbs(i) {
                    continue;
                }
                let others = self.members(i).len();
                let free = T::one() - T::from_usize(others).unwrap() * self.scenario.h_min;
                if free < self.scenario.h_min {
                    continue;
                }
                if let Some(b) = self.block(&x, i, j, free) {
                    let (c0, c1) = b.fastest_split();
                    let sp = SplitAllocation::new(c0, (b.c - c0 - c1).max(T::zero()), c1, free, self.scenario.h_min);
                    options.push((b.delay(c0, c1), Branch::Sbs(i), Some(sp)));
                }
            }
            let feasible = options.iter().filter(|o| o.0 <= task.t_max).min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let pick = feasible.or_else(|| options.iter().min_by(|a, b| a.0.partial_cmp(&b.0).unwrap()));
            if let Some(&(_, branch, sp)) = pick {
                self.branches[j] = branch;
                if let Some(sp) = sp {
                    self.splits[j] = sp;
                }
            }
        }
        Ok(true)
    }

    /// Turns SBS tasks that keep every bit on the terminal into local ones;
    /// that never costs more and frees SBS share.
    fn canonicalize(&mut self) {
        let mut changed = false;
        for j in 0..self.branches.len() {
            let sp = self.splits[j];
            let offloaded = sp.ci.max(T::zero()) + sp.c1.max(T::zero());
            if matches!(self.branches[j], Branch::Sbs(_)) && offloaded <= self.scenario.tasks[j].c * T::lit(1e-12) {
                self.branches[j] = Branch::Local;
                changed = true;
            }
        }
        if changed {
            self.allocate();
        }
    }

    /// Utility of the current assignment when it meets the hard constraints.
    fn feasible_utility(&self) -> Result<Option<T>> {
        let p = self.placement();
        let violated = check_feasibility(self.scenario, &p, 1e-9)?
            .iter()
            .any(|v| v.constraint.is_hard());
        if violated {
            return Ok(None);
        }
        Ok(utility(&p, self.scenario, self.weights).ok())
    }

    /// Fastest split of member `j` of SBS `i` at an equal share, as a move seed.
    fn seed_split(&self, i: usize, j: usize) -> SplitAllocation<T> {
        let n = T::from_usize(self.members(i).len().max(1)).unwrap();
        let h = (T::one() / n).clamp_to(self.scenario.h_min, T::one());
        let x = self.x_matrix();
        match self.block(&x, i, j, h) {
            Some(b) => {
                let (c0, c1) = b.fastest_split();
                SplitAllocation::new(c0, (b.c - c0 - c1).max(T::zero()), c1, h, self.scenario.h_min)
            }
            None => self.splits[j],
        }
    }

    /// Greedy single-task branch moves, each kept only if the utility drops.
    fn polish(&mut self) -> Result<()> {
        let Some(mut best) = self.feasible_utility()? else { return Ok(()) };
        let n = self.branches.len();
        for _ in 0..PASSES {
            let mut improved = false;
            for j in 0..n {
                let mut options = vec![Branch::Local, Branch::Mbs];
                options.extend(self.scenario.sbs_ids().map(Branch::Sbs));
                for b in options {
                    if b == self.branches[j] {
                        continue;
                    }
                    let saved = (self.branches.clone(), self.splits.clone());
                    self.branches[j] = b;
                    // members tuned to a larger share would crowd the newcomer out
                    let touched: Vec<usize> = match b {
                        Branch::Sbs(i) => vec![i],
                        _ => Vec::new(),
                    };
                    match self.settle(&touched)? {
                        Some(u) if u < best - best.abs() * T::lit(1e-12) => {
                            best = u;
                            improved = true;
                        }
                        _ => (self.branches, self.splits) = saved,
                    }
                }
            }
            improved |= self.swap_pass(&mut best)?;
            if !improved {
                break;
            }
        }
        Ok(())
    }

    /// Re-balances after branches changed and returns the new feasible utility.
    fn settle(&mut self, touched: &[usize]) -> Result<Option<T>> {
        for &i in touched {
            for m in self.members(i) {
                self.splits[m] = self.seed_split(i, m);
            }
        }
        self.enforce_count();
        // the move changed interference everywhere; stale splits would be demoted
        self.optimize_splits();
        self.allocate();
        for _ in 0..2 {
            self.optimize_splits();
            self.allocate();
        }
        self.feasible_utility()
    }

    /// Exchanges the stations of two tasks sitting on different SBSs.
    fn swap_pass(&mut self, best: &mut T) -> Result<bool> {
        let on_sbs: Vec<(usize, usize)> = self
            .branches
            .iter()
            .enumerate()
            .filter_map(|(j, b)| match *b {
                Branch::Sbs(i) => Some((j, i)),
                _ => None,
            })
            .collect();
        let mut improved = false;
        let mut tried = 0;
        for (a, &(ja, ia)) in on_sbs.iter().enumerate() {
            for &(jb, ib) in &on_sbs[a + 1..] {
                if ia == ib || self.branches[ja] != Branch::Sbs(ia) || self.branches[jb] != Branch::Sbs(ib) {
                    continue;
                }
                if tried == SWAP_LIMIT {
                    return Ok(improved);
                }
                tried += 1;
                let saved = (self.branches.clone(), self.splits.clone());
                self.branches.swap(ja, jb);
                match self.settle(&[ia, ib])? {
                    Some(u) if u < *best - best.abs() * T::lit(1e-12) => {
                        *best = u;
                        improved = true;
                    }
                    _ => (self.branches, self.splits) = saved,
                }
            }
        }
        Ok(improved)
    }
}

/// Per-task argmax of the global variables, then capacity and deadline
/// repair with shares and splits re-optimized under the fixed branches.
/// A second start from each task's standalone best branch goes through the
/// same repair and polish; the cheaper of the two is returned.
pub fn round_to_feasible<T: Real>(
    st: &ConsensusState<T>,
    scenario: &Scenario<T>,
    weights: UtilityWeights<T>,
    scales: &[T],
    _cbgp: &CbgpConfig<T>,
) -> Result<Placement<T>> {
    let relaxed = st.relaxed_placement();
    let branches = relaxed.argmax_branches();
    let strength = branches
        .iter()
        .enumerate()
        .map(|(j, b)| match *b {
            Branch::Local => relaxed.z[j],
            Branch::Mbs => relaxed.y[j],
            Branch::Sbs(i) => relaxed.x[i - 1][j],
        })
        .collect();
    let splits = branches
        .iter()
        .enumerate()
        .map(|(j, b)| match *b {
            Branch::Sbs(i) => st.split[i - 1][j],
            _ => SplitAllocation::even(scenario.tasks[j].c, scenario.h_min),
        })
        .collect();
    let primary = finished(repaired(scenario, weights, scales.to_vec(), branches, splits, strength));
    let (b, sp, strength) = standalone_start(scenario, weights, scales)?;
    let alternative = finished(repaired(scenario, weights, scales.to_vec(), b, sp, strength));
    match (primary, alternative) {
        (Ok((p, u)), Ok((q, v))) => Ok(if v < u { q } else { p }),
        (Ok((p, _)), Err(_)) | (Err(_), Ok((p, _))) => Ok(p),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Polishes a repaired assignment and returns it with its utility.
fn finished<T: Real>(r: Result<Repair<'_, T>>) -> Result<(Placement<T>, T)> {
    let mut r = r?;
    r.polish()?;
    r.canonicalize();
    let p = r.placement();
    let u = utility(&p, r.scenario, r.weights)?;
    Ok((p, u))
}

/// Every task on the branch that is cheapest when it has the network to
/// itself. Strength is the relative margin over the runner-up.
#[allow(clippy::type_complexity)]
fn standalone_start<T: Real>(
    scenario: &Scenario<T>,
    weights: UtilityWeights<T>,
    scales: &[T],
) -> Result<(Vec<Branch>, Vec<SplitAllocation<T>>, Vec<T>)> {
    let n = scenario.n_tasks();
    let even: Vec<SplitAllocation<T>> =
        scenario.tasks.iter().map(|t| SplitAllocation::even(t.c, scenario.h_min)).collect();
    let mut r = Repair {
        scenario,
        weights,
        scales: scales.to_vec(),
        relay: relay_models(scenario)?,
        branches: vec![Branch::Local; n],
        splits: even.clone(),
        strength: vec![T::zero(); n],
    };
    let slack = T::one() + T::lit(1e-9);
    let mut out = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for j in 0..n {
        let task = &scenario.tasks[j];
        let mut options: Vec<(T, Branch, SplitAllocation<T>)> = Vec::new();
        let l = local_cost(task, &scenario.device);
        if l.delay <= task.t_max {
            options.push((l.weighted(weights), Branch::Local, even[j]));
        }
        if let Ok(m) = mbs_cost(task, scenario) {
            if m.delay <= task.t_max {
                options.push((m.weighted(weights), Branch::Mbs, even[j]));
            }
        }
        for i in scenario.sbs_ids() {
            r.branches[j] = Branch::Sbs(i);
            let x = r.x_matrix();
            if let Some(b) = r.block(&x, i, j, T::one()) {
                let (f0, f1) = b.fastest_split();
                let (c0, c1) = b.optimize_split(f0, f1, SPLIT_ROUNDS);
                if b.delay(c0, c1) <= task.t_max * slack {
                    let sp = SplitAllocation::new(c0, (b.c - c0 - c1).max(T::zero()), c1, T::one(), scenario.h_min);
                    let link = ThreeTierLink { rate: b.rate, wired_delay: r.relay[i - 1].delay(c1) };
                    if let Ok(c) = three_tier_cost(task, i, &sp, scenario, &link) {
                        options.push((c.weighted(weights), Branch::Sbs(i), sp));
                    }
                }
            }
            r.branches[j] = Branch::Local;
        }
        options.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let (branch, split, margin) = match options.as_slice() {
            [] => (Branch::Mbs, even[j], T::zero()),
            [only] => (only.1, only.2, T::infinity()),
            [first, second, ..] => (first.1, first.2, (second.0 - first.0) / first.0.abs().max(T::min_positive_value())),
        };
        out.0.push(branch);
        out.1.push(split);
        out.2.push(margin);
    }
    // splits tuned for a whole SBS fail once it is shared
    r.branches = out.0.clone();
    for (j, b) in out.0.iter().enumerate() {
        if let Branch::Sbs(i) = *b {
            out.1[j] = r.seed_split(i, j);
        }
    }
    Ok(out)
}

/// Capacity and deadline repair of a hard branch choice.
pub fn repair<T: Real>(
    scenario: &Scenario<T>,
    weights: UtilityWeights<T>,
    scales: Vec<T>,
    branches: Vec<Branch>,
    splits: Vec<SplitAllocation<T>>,
    strength: Vec<T>,
) -> Result<Placement<T>> {
    Ok(repaired(scenario, weights, scales, branches, splits, strength)?.placement())
}

fn repaired<'a, T: Real>(
    scenario: &'a Scenario<T>,
    weights: UtilityWeights<T>,
    scales: Vec<T>,
    branches: Vec<Branch>,
    splits: Vec<SplitAllocation<T>>,
    strength: Vec<T>,
) -> Result<Repair<'a, T>> {
    let mut r = Repair { scenario, weights, scales, relay: relay_models(scenario)?, branches, splits, strength };
    for _ in 0..PASSES {
        r.enforce_count();
        let demoted = r.allocate();
        r.optimize_splits();
        r.allocate();
        let promoted = r.promote()?;
        if !demoted && !promoted {
            break;
        }
    }
    r.enforce_count();
    r.allocate();
    let p = r.placement();
    let bad: Vec<usize> = check_feasibility(scenario, &p, 1e-9)?
        .into_iter()
        .filter(|v| v.constraint.is_hard())
        .filter_map(|v| v.task.or(v.station.map(|_| usize::MAX)))
        .collect();
    if bad.is_empty() {
        Ok(r)
    } else {
        Err(Error::InfeasibleTask(bad))
    }
}
