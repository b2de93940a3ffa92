//! Delay, energy and weighted utility of placements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::scenario::{ChannelMatrix, LocalDevice, PathTarget, QuadraticDelay, Scenario, Station, Task, MBS};

/// Hard execution branch of one task. `Sbs` carries the station id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Local,
    Mbs,
    Sbs(usize),
}

/// Three-tier split of one task at one SBS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAllocation<T> {
    /// Bits processed on the terminal.
    pub c0: T,
    /// Bits relayed to and processed on the MBS.
    pub c1: T,
    /// Bits processed on the SBS.
    pub ci: T,
    /// Fraction of the SBS compute granted to the task.
    pub h: T,
    /// Reciprocal resource `1/h`.
    pub r: T,
    /// Linearized product `x·r`.
    #[serde(rename = "R")]
    pub rr: T,
    pub h_min: T,
}

impl<T: Real> SplitAllocation<T> {
    pub fn new(c0: T, ci: T, c1: T, h: T, h_min: T) -> Self {
        let r = T::one() / h;
        Self { c0, c1, ci, h, r, rr: r, h_min }
    }

    /// Equal thirds and the whole SBS.
    pub fn even(c: T, h_min: T) -> Self {
        let third = c / T::lit(3.0);
        Self::new(third, third, c - third - third, T::one(), h_min)
    }

    pub fn total(&self) -> T {
        self.c0 + self.c1 + self.ci
    }

    pub fn set_h(&mut self, h: T) {
        self.h = h;
        self.r = T::one() / h;
    }

    pub fn validate(&self, c: T) -> Result<()> {
        let tol = T::lit(1e-9) * c.max(T::one());
        let in_range = |v: T| v >= -tol && v <= c + tol;
        if !(in_range(self.c0) && in_range(self.c1) && in_range(self.ci)) {
            return Err(Error::Domain(format!("split part outside [0, {c}]")));
        }
        if (self.total() - c).abs() > tol {
            return Err(Error::Domain(format!("split sums to {} instead of {c}", self.total())));
        }
        if !(self.h > T::zero() && self.h >= self.h_min * (T::one() - T::lit(1e-9)) && self.h <= T::one()) {
            return Err(Error::Domain(format!("resource share {} outside [h_min, 1]", self.h)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityWeights<T> {
    pub alpha: T,
}

impl<T: Real> UtilityWeights<T> {
    pub fn new(alpha: T) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// Relaxed or hard assignment of every task.
///
/// SBS rows are indexed by slot `k = station - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement<T> {
    pub z: Vec<T>,
    pub y: Vec<T>,
    /// `x[k][j]`, task `j` at SBS station `k + 1`.
    pub x: Vec<Vec<T>>,
    /// `split[k][j]`, same indexing as `x`.
    pub split: Vec<Vec<SplitAllocation<T>>>,
}

impl<T: Real> Placement<T> {
    pub fn uniform(scenario: &Scenario<T>) -> Self {
        let n = scenario.n_tasks();
        let s = scenario.n_sbs();
        let v = T::one() / T::from_usize(s + 2).unwrap();
        Self {
            z: vec![v; n],
            y: vec![v; n],
            x: vec![vec![v; n]; s],
            split: (0..s)
                .map(|_| scenario.tasks.iter().map(|t| SplitAllocation::even(t.c, scenario.h_min)).collect())
                .collect(),
        }
    }

    /// Hard placement from per-task branches; unused splits default to even thirds.
    pub fn from_branches(scenario: &Scenario<T>, branches: &[Branch], splits: &[Option<SplitAllocation<T>>]) -> Self {
        let mut p = Self::uniform(scenario);
        p.z.iter_mut().chain(p.y.iter_mut()).chain(p.x.iter_mut().flatten()).for_each(|v| *v = T::zero());
        for (j, b) in branches.iter().enumerate() {
            match *b {
                Branch::Local => p.z[j] = T::one(),
                Branch::Mbs => p.y[j] = T::one(),
                Branch::Sbs(i) => {
                    p.x[i - 1][j] = T::one();
                    if let Some(Some(sp)) = splits.get(j) {
                        p.split[i - 1][j] = *sp;
                    }
                }
            }
        }
        for (row_x, row_s) in p.x.iter().zip(p.split.iter_mut()) {
            for (x, sp) in row_x.iter().zip(row_s.iter_mut()) {
                sp.rr = *x * sp.r;
            }
        }
        p
    }

    /// Largest-weight branch per task; ties prefer local, then SBSs ascending, then MBS.
    pub fn argmax_branches(&self) -> Vec<Branch> {
        (0..self.z.len())
            .map(|j| {
                let mut best = (Branch::Local, self.z[j]);
                for (k, row) in self.x.iter().enumerate() {
                    if row[j] > best.1 {
                        best = (Branch::Sbs(k + 1), row[j]);
                    }
                }
                if self.y[j] > best.1 {
                    best = (Branch::Mbs, self.y[j]);
                }
                best.0
            })
            .collect()
    }

    /// Branch of a hard placement; `None` if task `j` is not 0/1-assigned.
    pub fn hard_branch(&self, j: usize) -> Option<Branch> {
        let one = |v: T| v == T::one();
        let zero = |v: T| v == T::zero();
        let mut found = None;
        let mut all = vec![(Branch::Local, self.z[j]), (Branch::Mbs, self.y[j])];
        all.extend(self.x.iter().enumerate().map(|(k, row)| (Branch::Sbs(k + 1), row[j])));
        for (b, v) in all {
            if one(v) {
                if found.is_some() {
                    return None;
                }
                found = Some(b);
            } else if !zero(v) {
                return None;
            }
        }
        found
    }
}

/// Delay and energy of one branch of one task.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchCost<T> {
    pub delay: T,
    pub energy: T,
}

impl<T: Real> BranchCost<T> {
    pub fn weighted(&self, w: UtilityWeights<T>) -> T {
        w.alpha * self.delay + (T::one() - w.alpha) * self.energy
    }
}

pub fn local_delay<T: Real>(task: &Task<T>, device: &LocalDevice<T>) -> T {
    task.cycles() / device.f_local
}

pub fn local_energy<T: Real>(task: &Task<T>, device: &LocalDevice<T>) -> T {
    task.cycles() * device.e_local
}

/// `bandwidth · log2(1 + sinr)`. An SINR below the scalar's resolution
/// rounds `1 + sinr` to one and is reported as an infeasible rate.
pub fn shannon_rate<T: Real>(bandwidth: T, sinr: T, station: usize, task: usize) -> Result<T> {
    let rate = bandwidth * (T::one() + sinr).log2();
    if !(rate > T::zero()) || !rate.is_finite() {
        return Err(Error::InfeasibleRate { station, task });
    }
    Ok(rate)
}

pub fn mbs_rate<T: Real>(task: &Task<T>, mbs: &Station<T>, channel: &ChannelMatrix<T>) -> Result<T> {
    let snr = mbs.tx_power * channel.gain[mbs.id][task.id] / channel.noise_power;
    shannon_rate(mbs.bandwidth, snr, mbs.id, task.id)
}

pub fn mbs_uplink_time<T: Real>(task: &Task<T>, mbs: &Station<T>, channel: &ChannelMatrix<T>) -> Result<T> {
    if task.c == T::zero() {
        return Ok(T::zero());
    }
    Ok(task.c / mbs_rate(task, mbs, channel)?)
}

pub fn mbs_total_delay<T: Real>(task: &Task<T>, mbs: &Station<T>, channel: &ChannelMatrix<T>) -> Result<T> {
    Ok(mbs_uplink_time(task, mbs, channel)? + task.cycles() / mbs.f)
}

pub fn mbs_energy<T: Real>(
    task: &Task<T>,
    device: &LocalDevice<T>,
    mbs: &Station<T>,
    channel: &ChannelMatrix<T>,
) -> Result<T> {
    Ok(device.tx_power * mbs_uplink_time(task, mbs, channel)? + task.cycles() * mbs.e_cycle)
}

/// Co-channel interference at SBS `sbs` seen by task `task`: tasks other
/// than `task` weighted by their assignment to the other SBSs.
pub fn interference<T: Real>(scenario: &Scenario<T>, x: &[Vec<T>], sbs: usize, task: usize) -> T {
    let p = scenario.stations[sbs].tx_power;
    let gains = &scenario.channel.gain[sbs];
    let mut acc = T::zero();
    for (k, row) in x.iter().enumerate() {
        if k + 1 == sbs {
            continue;
        }
        for (jp, &w) in row.iter().enumerate() {
            if jp != task && w > T::zero() {
                acc = acc + w * p * gains[jp];
            }
        }
    }
    acc
}

pub fn sbs_rate<T: Real>(scenario: &Scenario<T>, sbs: usize, task: usize, interference: T) -> Result<T> {
    let st = &scenario.stations[sbs];
    let sinr = st.tx_power * scenario.channel.gain[sbs][task] / (scenario.channel.noise_power + interference);
    shannon_rate(st.bandwidth, sinr, sbs, task)
}

/// Per-task radio and wired conditions of a three-tier branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeTierLink<T> {
    /// Uplink rate to the SBS, bits/s.
    pub rate: T,
    /// Wired delay of the SBS-to-MBS relay path, seconds.
    pub wired_delay: T,
}

pub fn three_tier_delay<T: Real>(
    task: &Task<T>,
    sbs: &Station<T>,
    split: &SplitAllocation<T>,
    scenario: &Scenario<T>,
    link: &ThreeTierLink<T>,
) -> Result<T> {
    if !(split.h > T::zero()) {
        return Err(Error::Domain(format!("resource share {} must be positive", split.h)));
    }
    let local = split.c0 * task.u / scenario.device.f_local;
    let upload = (task.c - split.c0) / link.rate;
    let edge = split.ci * task.u / (split.h * sbs.f);
    let macro_ = split.c1 * task.u / scenario.mbs().f;
    Ok(local + upload + link.wired_delay + edge + macro_)
}

pub fn three_tier_energy<T: Real>(
    task: &Task<T>,
    sbs: &Station<T>,
    split: &SplitAllocation<T>,
    scenario: &Scenario<T>,
    link: &ThreeTierLink<T>,
) -> Result<T> {
    let upload = (task.c - split.c0) / link.rate;
    let transfer = if task.c > T::zero() { link.wired_delay * split.c1 / task.c } else { T::zero() };
    Ok(split.c0 * task.u * scenario.device.e_local
        + scenario.device.tx_power * upload
        + split.ci * task.u * sbs.e_cycle
        + scenario.channel.offload_power_sbs_mbs * transfer
        + split.c1 * task.u * scenario.mbs().e_cycle)
}

pub fn local_cost<T: Real>(task: &Task<T>, device: &LocalDevice<T>) -> BranchCost<T> {
    BranchCost { delay: local_delay(task, device), energy: local_energy(task, device) }
}

pub fn mbs_cost<T: Real>(task: &Task<T>, scenario: &Scenario<T>) -> Result<BranchCost<T>> {
    let mbs = scenario.mbs();
    Ok(BranchCost {
        delay: mbs_total_delay(task, mbs, &scenario.channel)?,
        energy: mbs_energy(task, &scenario.device, mbs, &scenario.channel)?,
    })
}

pub fn three_tier_cost<T: Real>(
    task: &Task<T>,
    sbs: usize,
    split: &SplitAllocation<T>,
    scenario: &Scenario<T>,
    link: &ThreeTierLink<T>,
) -> Result<BranchCost<T>> {
    let st = &scenario.stations[sbs];
    Ok(BranchCost {
        delay: three_tier_delay(task, st, split, scenario, link)?,
        energy: three_tier_energy(task, st, split, scenario, link)?,
    })
}

/// Relay delay model of every SBS, indexed by slot.
pub fn relay_models<T: Real>(scenario: &Scenario<T>) -> Result<Vec<QuadraticDelay<T>>> {
    scenario
        .sbs_ids()
        .map(|i| {
            let path = scenario
                .graph
                .path(0, PathTarget::Relay(i))
                .ok_or(Error::Lookup { kind: "relay path of SBS", id: i })?;
            QuadraticDelay::of_path(path, &scenario.graph)
        })
        .collect()
}

/// Interference and relay loads induced by a placement.
#[derive(Debug, Clone, PartialEq)]
pub struct CostContext<T> {
    /// `interference[k][j]` at SBS slot `k`.
    pub interference: Vec<Vec<T>>,
    /// Bits relayed from each SBS slot to the MBS.
    pub relay_load: Vec<T>,
    pub relay: Vec<QuadraticDelay<T>>,
}

impl<T: Real> CostContext<T> {
    pub fn new(scenario: &Scenario<T>, placement: &Placement<T>) -> Result<Self> {
        let n = scenario.n_tasks();
        let interference = scenario
            .sbs_ids()
            .map(|i| (0..n).map(|j| interference(scenario, &placement.x, i, j)).collect())
            .collect();
        let relay_load = placement
            .x
            .iter()
            .zip(&placement.split)
            .map(|(xr, sr)| xr.iter().zip(sr).map(|(&x, s)| x * s.c1).sum())
            .collect();
        Ok(Self { interference, relay_load, relay: relay_models(scenario)? })
    }

    pub fn link(&self, scenario: &Scenario<T>, sbs: usize, task: usize) -> Result<ThreeTierLink<T>> {
        let k = sbs - 1;
        Ok(ThreeTierLink {
            rate: sbs_rate(scenario, sbs, task, self.interference[k][task])?,
            wired_delay: self.relay[k].delay(self.relay_load[k]),
        })
    }
}

/// Weighted cost of every branch of task `j`, in the order local, MBS, SBS slots.
pub fn task_branch_costs<T: Real>(
    scenario: &Scenario<T>,
    placement: &Placement<T>,
    ctx: &CostContext<T>,
    j: usize,
) -> Result<(BranchCost<T>, BranchCost<T>, Vec<BranchCost<T>>)> {
    let task = &scenario.tasks[j];
    let local = local_cost(task, &scenario.device);
    let mbs = mbs_cost(task, scenario)?;
    let sbs = scenario
        .sbs_ids()
        .map(|i| {
            let link = ctx.link(scenario, i, j)?;
            three_tier_cost(task, i, &placement.split[i - 1][j], scenario, &link)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((local, mbs, sbs))
}

/// Weighted delay/energy objective summed over tasks and branches.
pub fn utility<T: Real>(placement: &Placement<T>, scenario: &Scenario<T>, weights: UtilityWeights<T>) -> Result<T> {
    let ctx = CostContext::new(scenario, placement)?;
    let mut total = T::zero();
    for j in 0..scenario.n_tasks() {
        let (local, mbs, sbs) = task_branch_costs(scenario, placement, &ctx, j)?;
        total = total + placement.z[j] * local.weighted(weights) + placement.y[j] * mbs.weighted(weights);
        for (k, c) in sbs.iter().enumerate() {
            if placement.x[k][j] != T::zero() {
                total = total + placement.x[k][j] * c.weighted(weights);
            }
        }
    }
    Ok(total)
}

/// Constraints of the hard problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Task finishes by its deadline.
    Deadline,
    /// SBS shares sum to at most one.
    Capacity,
    /// Exactly one branch per task.
    Assignment,
    /// Split parts are nonnegative and sum to the task size.
    Split,
}

impl Constraint {
    /// Deadline, capacity and assignment; splits are repaired by construction.
    pub fn is_hard(self) -> bool {
        !matches!(self, Constraint::Split)
    }
}

/// A violated constraint of the hard problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub task: Option<usize>,
    pub station: Option<usize>,
    pub excess: f64,
}

/// Delay of task `j` under its hard branch.
pub fn branch_delay<T: Real>(
    scenario: &Scenario<T>,
    placement: &Placement<T>,
    ctx: &CostContext<T>,
    j: usize,
    branch: Branch,
) -> Result<T> {
    let task = &scenario.tasks[j];
    match branch {
        Branch::Local => Ok(local_delay(task, &scenario.device)),
        Branch::Mbs => mbs_total_delay(task, scenario.mbs(), &scenario.channel),
        Branch::Sbs(i) => {
            let link = ctx.link(scenario, i, j)?;
            three_tier_delay(task, &scenario.stations[i], &placement.split[i - 1][j], scenario, &link)
        }
    }
}

/// Checks a hard placement against the deadline, capacity, assignment and
/// split constraints. `rel_tol` loosens the deadline and capacity checks.
pub fn check_feasibility<T: Real>(scenario: &Scenario<T>, placement: &Placement<T>, rel_tol: f64) -> Result<Vec<Violation>> {
    let ctx = CostContext::new(scenario, placement)?;
    let mut out = Vec::new();
    for j in 0..scenario.n_tasks() {
        let Some(branch) = placement.hard_branch(j) else {
            out.push(Violation { constraint: Constraint::Assignment, task: Some(j), station: None, excess: 1.0 });
            continue;
        };
        let t_max = scenario.tasks[j].t_max.as_f64();
        let d = match branch_delay(scenario, placement, &ctx, j, branch) {
            Ok(d) => d.as_f64(),
            Err(Error::InfeasibleRate { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if d > t_max * (1.0 + rel_tol) {
            out.push(Violation { constraint: Constraint::Deadline, task: Some(j), station: None, excess: d - t_max });
        }
        if let Branch::Sbs(i) = branch {
            if placement.split[i - 1][j].validate(scenario.tasks[j].c).is_err() {
                out.push(Violation { constraint: Constraint::Split, task: Some(j), station: Some(i), excess: 0.0 });
            }
        }
    }
    for (k, (xr, sr)) in placement.x.iter().zip(&placement.split).enumerate() {
        let used: f64 = xr.iter().zip(sr).map(|(&x, s)| (x * s.h).as_f64()).sum();
        if used > 1.0 + rel_tol {
            out.push(Violation { constraint: Constraint::Capacity, task: None, station: Some(k + 1), excess: used - 1.0 });
        }
    }
    Ok(out)
}

/// Convenience for the MBS station id.
pub const fn mbs_id() -> usize {
    MBS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig, StationKind};

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    fn device(e_local: f64) -> LocalDevice<f64> {
        LocalDevice { f_local: 5e9, e_local, tx_power: 0.1 }
    }

    fn task(c: f64) -> Task<f64> {
        Task { id: 0, c, t_max: 20.0, u: 18_000.0 }
    }

    /// One task, one SBS, with a chosen MBS SNR.
    fn tiny(snr: f64, e: (f64, f64, f64)) -> Scenario<f64> {
        let cfg = ScenarioConfig { n_tasks: 1, n_sbs: 1, e_local: Some(e.0), e_sbs: Some(e.1), e_mbs: Some(e.2), ..Default::default() };
        let mut s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        s.channel.noise_power = 1.0;
        s.stations[MBS].tx_power = 1.0;
        s.channel.gain[MBS][0] = snr;
        s
    }

    #[test]
    fn local_examples() {
        assert!(close(local_delay(&task(1e4), &device(0.0)), 0.036, 1e-12));
        assert_eq!(local_delay(&task(0.0), &device(0.0)), 0.0);
        let fast = LocalDevice { f_local: 1e10, ..device(0.0) };
        assert!(close(local_delay(&task(1e4), &fast), 0.018, 1e-12));
        assert!(close(local_energy(&task(1e4), &device(2.5e-7)), 45.0, 1e-12));
        assert_eq!(local_energy(&task(0.0), &device(2.5e-7)), 0.0);
        let e1 = local_energy(&task(3e3), &device(2.5e-7));
        assert!(close(local_energy(&task(6e3), &device(2.5e-7)), 2.0 * e1, 1e-12));
    }

    #[test]
    fn mbs_examples() {
        let s = tiny(1023.0, (2.5e-7, 2e-7, 1e-7));
        let mut t = task(5000.0);
        let mbs = s.mbs();
        assert!(close(mbs_uplink_time(&t, mbs, &s.channel).unwrap(), 2.5e-5, 1e-12));
        assert!(close(mbs_total_delay(&t, mbs, &s.channel).unwrap(), 9.25e-4, 1e-12));
        assert!(close(mbs_energy(&t, &device(2.5e-7), mbs, &s.channel).unwrap(), 9.0000025, 1e-12));
        t.c = 0.0;
        assert_eq!(mbs_total_delay(&t, mbs, &s.channel).unwrap(), 0.0);
        assert_eq!(mbs_energy(&t, &device(2.5e-7), mbs, &s.channel).unwrap(), 0.0);

        let s = tiny(1.0, (2.5e-7, 2e-7, 1e-7));
        let t = task(4e7);
        assert!(close(mbs_uplink_time(&t, s.mbs(), &s.channel).unwrap(), 2.0, 1e-12));
        let mut inf = *s.mbs();
        inf.f = f64::INFINITY;
        assert!(close(mbs_total_delay(&t, &inf, &s.channel).unwrap(), 2.0, 1e-12));
    }

    #[test]
    fn vanishing_snr_is_infeasible() {
        let s = tiny(1e-30, (0.0, 0.0, 0.0));
        let err = mbs_uplink_time(&task(5000.0), s.mbs(), &s.channel).unwrap_err();
        assert!(matches!(err, Error::InfeasibleRate { station: 0, task: 0 }));
    }

    fn worked_split() -> (Scenario<f64>, Task<f64>, SplitAllocation<f64>) {
        let s = tiny(1023.0, (2.5e-7, 2e-7, 1e-7));
        let t = task(9000.0);
        (s, t, SplitAllocation::new(3000.0, 3000.0, 3000.0, 0.5, 0.05))
    }

    #[test]
    fn three_tier_delay_example() {
        let (s, t, split) = worked_split();
        let link = ThreeTierLink { rate: 2e8, wired_delay: 0.012 };
        let d = three_tier_delay(&t, &s.stations[1], &split, &s, &link).unwrap();
        assert!(close(d, 0.02877, 1e-12));
        let mut whole = split;
        whole.set_h(1.0);
        let d1 = three_tier_delay(&t, &s.stations[1], &whole, &s, &link).unwrap();
        assert!(close(d - d1, 0.0054 - 0.0027, 1e-9));
    }

    #[test]
    fn degenerate_split_is_local() {
        let (s, t, _) = worked_split();
        let split = SplitAllocation::new(t.c, 0.0, 0.0, 1.0, 0.05);
        let link = ThreeTierLink { rate: 2e8, wired_delay: 0.0 };
        let d = three_tier_delay(&t, &s.stations[1], &split, &s, &link).unwrap();
        assert_eq!(d, local_delay(&t, &s.device));
        let e = three_tier_energy(&t, &s.stations[1], &split, &s, &link).unwrap();
        assert_eq!(e, local_energy(&t, &s.device));
    }

    #[test]
    fn three_tier_energy_example() {
        let (s, t, split) = worked_split();
        // c1/c = 1/3 of the path delay is attributed to the task
        let link = ThreeTierLink { rate: 2e8, wired_delay: 0.036 };
        let e = three_tier_energy(&t, &s.stations[1], &split, &s, &link).unwrap();
        assert!(close(e, 29.712003, 1e-9));
        let zero = SplitAllocation::new(0.0, 0.0, 0.0, 1.0, 0.05);
        let t0 = task(0.0);
        assert_eq!(three_tier_energy(&t0, &s.stations[1], &zero, &s, &link).unwrap(), 0.0);
    }

    #[test]
    fn utility_examples() {
        let cfg = ScenarioConfig { n_tasks: 1, n_sbs: 1, e_local: Some(2.5e-7), ..Default::default() };
        let mut s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        s.tasks[0].c = 1e4;
        let p = Placement::from_branches(&s, &[Branch::Local], &[]);
        let u = utility(&p, &s, UtilityWeights::new(0.5).unwrap()).unwrap();
        assert!(close(u, 22.518, 1e-12));
        assert!(close(utility(&p, &s, UtilityWeights::new(1.0).unwrap()).unwrap(), 0.036, 1e-12));
        assert!(close(utility(&p, &s, UtilityWeights::new(0.0).unwrap()).unwrap(), 45.0, 1e-12));
        assert!(UtilityWeights::new(1.5).is_err());
    }

    #[test]
    fn interference_excludes_own_station_and_task() {
        let cfg = ScenarioConfig { n_tasks: 3, n_sbs: 2, ..Default::default() };
        let s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        let mut x = vec![vec![0.0; 3]; 2];
        x[0][1] = 1.0; // task 1 on SBS 1
        x[1][2] = 0.5; // task 2 half on SBS 2
        let p = s.stations[1].tx_power;
        // at SBS 1 only SBS 2's tasks count
        assert!(close(interference(&s, &x, 1, 0), 0.5 * p * s.gain(1, 2), 1e-12));
        assert_eq!(interference(&s, &x, 1, 2), 0.0);
        assert!(close(interference(&s, &x, 2, 0), p * s.gain(2, 1), 1e-12));
        assert_eq!(s.stations[2].kind, StationKind::Sbs);
    }

    #[test]
    fn feasibility_flags_each_constraint() {
        let cfg = ScenarioConfig { n_tasks: 2, n_sbs: 1, h_min: 0.6, ..Default::default() };
        let mut s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        let split = SplitAllocation::new(0.0, s.tasks[0].c, 0.0, 0.6, 0.6);
        let mut p = Placement::from_branches(&s, &[Branch::Sbs(1), Branch::Sbs(1)], &[Some(split), Some(split)]);
        p.split[0][1] = SplitAllocation::new(0.0, s.tasks[1].c, 0.0, 0.6, 0.6);
        let v = check_feasibility(&s, &p, 1e-9).unwrap();
        assert!(v.iter().any(|v| v.constraint == Constraint::Capacity));

        let mut bad = p.clone();
        bad.z[0] = 1.0;
        let v = check_feasibility(&s, &bad, 1e-9).unwrap();
        assert!(v.iter().any(|v| v.constraint == Constraint::Assignment && v.task == Some(0)));

        s.tasks[0].t_max = 1e-6;
        let local = Placement::from_branches(&s, &[Branch::Local, Branch::Local], &[]);
        let v = check_feasibility(&s, &local, 1e-9).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].constraint, Constraint::Deadline);
    }

    #[test]
    fn argmax_tie_order() {
        let cfg = ScenarioConfig { n_tasks: 1, n_sbs: 2, ..Default::default() };
        let s: Scenario<f64> = generate_scenario(&cfg).unwrap();
        let mut p = Placement::uniform(&s);
        assert_eq!(p.argmax_branches(), vec![Branch::Local]);
        p.z[0] = 0.0;
        assert_eq!(p.argmax_branches(), vec![Branch::Sbs(1)]);
        p.x[0][0] = 0.0;
        p.x[1][0] = 0.0;
        assert_eq!(p.argmax_branches(), vec![Branch::Mbs]);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn utility_affine_in_assignment(a in 0.0f64..1.0, b in 0.0f64..1.0, t in 0.0f64..1.0, seed in 0u64..20, alpha in 0.0f64..=1.0) {
            let cfg = ScenarioConfig { n_tasks: 2, n_sbs: 1, seed, ..Default::default() };
            let s: Scenario<f64> = generate_scenario(&cfg).unwrap();
            let w = UtilityWeights::new(alpha).unwrap();
            // moves z/y of a task with no interference or relay coupling
            let mut p = Placement::uniform(&s);
            p.x[0] = vec![0.0, 0.0];
            let mut pa = p.clone();
            pa.z[0] = a;
            pa.y[0] = 1.0 - a;
            let mut pb = p.clone();
            pb.z[0] = b;
            pb.y[0] = 1.0 - b;
            let mut pm = p.clone();
            pm.z[0] = t * a + (1.0 - t) * b;
            pm.y[0] = 1.0 - pm.z[0];
            let ua = utility(&pa, &s, w).unwrap();
            let ub = utility(&pb, &s, w).unwrap();
            let um = utility(&pm, &s, w).unwrap();
            prop_assert!((um - (t * ua + (1.0 - t) * ub)).abs() <= 1e-9 * ua.abs().max(ub.abs()).max(1e-12));
        }

        #[test]
        fn costs_nonnegative(c0 in 0.0f64..1.0, c1 in 0.0f64..1.0, h in 0.05f64..=1.0, seed in 0u64..20) {
            let cfg = ScenarioConfig { n_tasks: 3, n_sbs: 2, seed, ..Default::default() };
            let s: Scenario<f64> = generate_scenario(&cfg).unwrap();
            let t = s.tasks[0];
            let (a, b) = (c0.min(c1), c0.max(c1));
            let split = SplitAllocation::new(a * t.c, (b - a) * t.c, (1.0 - b) * t.c, h, 0.05);
            let p = Placement::uniform(&s);
            let ctx = CostContext::new(&s, &p).unwrap();
            let link = ctx.link(&s, 1, 0).unwrap();
            let c = three_tier_cost(&t, 1, &split, &s, &link).unwrap();
            prop_assert!(c.delay >= 0.0 && c.energy >= 0.0);
            let m = mbs_cost(&t, &s).unwrap();
            prop_assert!(m.delay >= 0.0 && m.energy >= 0.0);
        }

        #[test]
        fn energy_linear_in_each_part(c0 in 0.0f64..5e3, ci in 0.0f64..5e3, c1 in 0.0f64..5e3, k in 0.0f64..2.0) {
            let (s, mut t, _) = worked_split();
            let link = ThreeTierLink { rate: 2e8, wired_delay: 0.01 };
            let st = &s.stations[1];
            t.c = 2e4;
            let e = |c0: f64| three_tier_energy(&t, st, &SplitAllocation::new(c0, ci, c1, 1.0, 0.05), &s, &link).unwrap();
            let (e0, e1, ek) = (e(0.0), e(c0), e(k * c0));
            prop_assert!(((ek - e0) - k * (e1 - e0)).abs() <= 1e-9 * e1.abs().max(1e-9));
        }
    }
}
