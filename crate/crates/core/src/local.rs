//! Per-task local subproblems: the three-tier block (linearized product,
//! majorized binary penalty, cyclic block projected gradient) and the
//! two-point local/MBS blocks.

use crate::cost::{local_cost, mbs_cost, SplitAllocation, UtilityWeights};
use crate::num::Real;
use crate::scenario::{QuadraticDelay, Scenario, Task};

/// Admissible interval of the linearized product `R = x̂·r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RltInterval<T> {
    pub lo: T,
    pub hi: T,
    /// The four envelope constraints had no common point; `lo == hi` is
    /// then the endpoint nearest to the violated pair.
    pub empty: bool,
}

impl<T: Real> RltInterval<T> {
    pub fn project(&self, v: T) -> T {
        v.clamp_to(self.lo, self.hi)
    }
}

/// Intersection of `x̂ ≤ R ≤ x̂/h_min`, `r + (x̂ - 1)/h_min ≤ R ≤ r + x̂ - 1`.
pub fn rlt_bounds<T: Real>(xhat: T, r: T, h_min: T) -> RltInterval<T> {
    let inv = T::one() / h_min;
    let r = r.clamp_to(T::one(), inv);
    let lo = xhat.max(r - (T::one() - xhat) * inv);
    let hi = (xhat * inv).min(r - (T::one() - xhat));
    if lo <= hi {
        RltInterval { lo, hi, empty: false }
    } else {
        let mid = (lo + hi) / T::lit(2.0);
        RltInterval { lo: mid, hi: mid, empty: true }
    }
}

/// Tangent upper bound of `x - x²` taken at `xk`, evaluated at `x`.
pub fn majorize_penalty<T: Real>(xk: T, x: T) -> T {
    x - xk * xk - T::lit(2.0) * xk * (x - xk)
}

/// `{v ∈ [lo, hi] : a v² + b v + k ≤ 0}`, assuming it is an interval (`a ≥ 0`).
fn quad_sublevel<T: Real>(a: T, b: T, k: T, lo: T, hi: T) -> Option<(T, T)> {
    if a <= T::zero() || a * hi * hi <= T::epsilon() * (b.abs() * hi + k.abs()) {
        // effectively linear
        if b == T::zero() {
            return if k <= T::zero() { Some((lo, hi)) } else { None };
        }
        let root = -k / b;
        let (l, h) = if b > T::zero() { (lo, hi.min(root)) } else { (lo.max(root), hi) };
        return if l <= h { Some((l, h)) } else { None };
    }
    let disc = b * b - T::lit(4.0) * a * k;
    if disc < T::zero() {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable roots
    let qq = -(b + b.signum() * sq) / T::lit(2.0);
    let (mut r1, mut r2) = if qq != T::zero() { (qq / a, k / qq) } else { (T::zero(), T::zero()) };
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    let (l, h) = (lo.max(r1), hi.min(r2));
    if l <= h {
        Some((l, h))
    } else {
        None
    }
}

/// Solver knobs of the three-tier block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbgpConfig<T> {
    /// Weight of the concave binary penalty `x̂(1 - x̂)`.
    pub delta: T,
    /// Maximum number of full sweeps.
    pub rounds: usize,
    /// Relative objective change that ends the sweeps.
    pub tol: T,
    /// Numerator of the diminishing multiplier step `a/(k+1)`.
    pub subgradient_a: T,
}

impl<T: Real> Default for CbgpConfig<T> {
    fn default() -> Self {
        Self { delta: T::one(), rounds: 50, tol: T::lit(1e-6), subgradient_a: T::lit(0.1) }
    }
}

/// Multipliers of `-x̂ ≤ 0`, `x̂ - 1 ≤ 0` and the four envelope constraints.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Multipliers<T> {
    pub eps: T,
    pub phi: T,
    pub varpi: T,
    pub theta: T,
    pub varrho: T,
    pub sigma: T,
}

impl<T: Real> Multipliers<T> {
    pub fn all_nonnegative(&self) -> bool {
        [self.eps, self.phi, self.varpi, self.theta, self.varrho, self.sigma].iter().all(|&m| m >= T::zero())
    }
}

/// Primal variables of one (SBS, task) block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockState<T> {
    pub xhat: T,
    pub c0: T,
    pub c1: T,
    pub rr: T,
}

/// Iteration state carried across sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbgpState<T> {
    pub primal: BlockState<T>,
    pub mult: Multipliers<T>,
    /// Majorization point (previous `x̂`).
    pub xk: T,
    pub sweeps: usize,
}

/// Frozen data of the three-tier subproblem of task `j` at SBS `i`.
///
/// All cost terms are multiplied by `scale` so that per-task costs are
/// commensurate with the proximal weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeTierBlock<T> {
    pub c: T,
    pub u: T,
    pub t_max: T,
    pub f_local: T,
    pub f_sbs: T,
    pub f_mbs: T,
    pub e_local: T,
    pub e_sbs: T,
    pub e_mbs: T,
    pub p_user: T,
    pub p_relay: T,
    /// Uplink rate to the SBS.
    pub rate: T,
    pub relay: QuadraticDelay<T>,
    /// Bits relayed by the other tasks of the same SBS.
    pub other_load: T,
    pub alpha: T,
    pub scale: T,
    pub rho: T,
    /// Consensus dual of `x̂ - x`.
    pub dual: T,
    /// Global consensus value of `x`.
    pub global: T,
    pub r: T,
    pub h_min: T,
    pub delta: T,
}

/// Result of a three-tier block solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome<T> {
    pub state: CbgpState<T>,
    pub split: SplitAllocation<T>,
    /// True objective after every sweep, starting with the initial point.
    pub history: Vec<T>,
    /// Whether some split meets the deadline at resource `1/r`.
    pub deadline_feasible: bool,
}

impl<T: Real> ThreeTierBlock<T> {
    /// Builds the block for task `task` at station `sbs`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: &Scenario<T>,
        sbs: usize,
        task: &Task<T>,
        rate: T,
        relay: QuadraticDelay<T>,
        other_load: T,
        weights: UtilityWeights<T>,
        scale: T,
        rho: T,
        dual: T,
        global: T,
        r: T,
        delta: T,
    ) -> Self {
        let st = &scenario.stations[sbs];
        Self {
            c: task.c,
            u: task.u,
            t_max: task.t_max,
            f_local: scenario.device.f_local,
            f_sbs: st.f,
            f_mbs: scenario.mbs().f,
            e_local: scenario.device.e_local,
            e_sbs: st.e_cycle,
            e_mbs: scenario.mbs().e_cycle,
            p_user: scenario.device.tx_power,
            p_relay: scenario.channel.offload_power_sbs_mbs,
            rate,
            relay,
            other_load,
            alpha: weights.alpha,
            scale,
            rho,
            dual,
            global,
            r,
            h_min: scenario.h_min,
            delta,
        }
    }

    fn wired(&self, c1: T) -> T {
        self.relay.delay(self.other_load + c1)
    }

    fn wired_slope(&self, c1: T) -> T {
        self.relay.slope(self.other_load + c1)
    }

    /// Delay of the branch at resource `1/r`.
    pub fn delay(&self, c0: T, c1: T) -> T {
        let ci = self.c - c0 - c1;
        c0 * self.u / self.f_local
            + (self.c - c0) / self.rate
            + self.wired(c1)
            + ci * self.u * self.r / self.f_sbs
            + c1 * self.u / self.f_mbs
    }

    /// Scaled weighted cost per unit `x̂`, excluding the SBS compute delay.
    pub fn unit_cost(&self, c0: T, c1: T) -> T {
        let ci = self.c - c0 - c1;
        let upload = (self.c - c0) / self.rate;
        let w = self.wired(c1);
        let delay = c0 * self.u / self.f_local + upload + w + c1 * self.u / self.f_mbs;
        let transfer = if self.c > T::zero() { w * c1 / self.c } else { T::zero() };
        let energy = c0 * self.u * self.e_local
            + self.p_user * upload
            + ci * self.u * self.e_sbs
            + self.p_relay * transfer
            + c1 * self.u * self.e_mbs;
        self.scale * (self.alpha * delay + (T::one() - self.alpha) * energy)
    }

    /// Coefficient of `R` in the objective (scaled SBS compute delay per unit `R`).
    pub fn r_coeff(&self, c0: T, c1: T) -> T {
        self.scale * self.alpha * (self.c - c0 - c1) * self.u / self.f_sbs
    }

    fn prox(&self, xhat: T) -> T {
        let d = xhat - self.global;
        self.dual * d + self.rho / T::lit(2.0) * d * d
    }

    /// Objective with the exact concave penalty.
    pub fn objective(&self, s: &BlockState<T>) -> T {
        s.xhat * self.unit_cost(s.c0, s.c1)
            + self.r_coeff(s.c0, s.c1) * s.rr
            + self.prox(s.xhat)
            + self.delta * s.xhat * (T::one() - s.xhat)
    }

    /// Objective with the penalty replaced by its tangent at `xk`.
    pub fn surrogate(&self, s: &BlockState<T>, xk: T) -> T {
        s.xhat * self.unit_cost(s.c0, s.c1)
            + self.r_coeff(s.c0, s.c1) * s.rr
            + self.prox(s.xhat)
            + self.delta * majorize_penalty(xk, s.xhat)
    }

    fn grad_c0(&self, s: &BlockState<T>) -> T {
        let dd = self.u / self.f_local - T::one() / self.rate;
        let de = self.u * self.e_local - self.p_user / self.rate - self.u * self.e_sbs;
        s.xhat * self.scale * (self.alpha * dd + (T::one() - self.alpha) * de) - self.r_coeff_slope() * s.rr
    }

    fn grad_c1(&self, s: &BlockState<T>) -> T {
        let w = self.wired(s.c1);
        let ws = self.wired_slope(s.c1);
        let dd = ws + self.u / self.f_mbs;
        let dtransfer = if self.c > T::zero() { (ws * s.c1 + w) / self.c } else { T::zero() };
        let de = -self.u * self.e_sbs + self.p_relay * dtransfer + self.u * self.e_mbs;
        s.xhat * self.scale * (self.alpha * dd + (T::one() - self.alpha) * de) - self.r_coeff_slope() * s.rr
    }

    /// `-∂ r_coeff / ∂ c0 = -∂ r_coeff / ∂ c1`.
    fn r_coeff_slope(&self) -> T {
        self.scale * self.alpha * self.u / self.f_sbs
    }

    /// Deadline-feasible interval of `c0` for fixed `c1`.
    fn c0_interval(&self, c1: T) -> Option<(T, T)> {
        let hi = (self.c - c1).max(T::zero());
        let a0 = self.u / self.f_local - T::one() / self.rate - self.u * self.r / self.f_sbs;
        let k = self.delay(T::zero(), c1) - self.t_max;
        quad_sublevel(T::zero(), a0, k, T::zero(), hi)
    }

    /// Deadline-feasible interval of `c1` for fixed `c0`.
    fn c1_interval(&self, c0: T) -> Option<(T, T)> {
        let hi = (self.c - c0).max(T::zero());
        let q = self.relay.quad;
        let l = self.relay.lin;
        let lo_load = self.other_load;
        let b1 = self.u / self.f_mbs - self.u * self.r / self.f_sbs;
        // delay(c0, c1) = q c1² + (2 q L + l + b1) c1 + delay(c0, 0)
        let k = self.delay(c0, T::zero()) - self.t_max;
        quad_sublevel(q, T::lit(2.0) * q * lo_load + l + b1, k, T::zero(), hi)
    }

    /// Split minimizing the delay at resource `1/r`.
    pub fn fastest_split(&self) -> (T, T) {
        let a0 = self.u / self.f_local - T::one() / self.rate - self.u * self.r / self.f_sbs;
        let q = self.relay.quad;
        let b = T::lit(2.0) * q * self.other_load + self.relay.lin + self.u / self.f_mbs - self.u * self.r / self.f_sbs;
        // c0 takes everything not relayed when local beats the SBS path
        let lin = if a0 < T::zero() { b - a0 } else { b };
        let c1 = if q > T::zero() { (-lin / (T::lit(2.0) * q)).clamp_to(T::zero(), self.c) } else if lin < T::zero() { self.c } else { T::zero() };
        let c0 = if a0 < T::zero() { self.c - c1 } else { T::zero() };
        (c0, c1)
    }

    pub fn deadline_feasible(&self) -> bool {
        let (c0, c1) = self.fastest_split();
        self.delay(c0, c1) <= self.t_max
    }

    /// Exact minimizer of the surrogate over `x̂` with `R` on its lower envelope.
    pub fn xhat_step(&self, c0: T, c1: T, xk: T) -> (T, T) {
        let k = self.unit_cost(c0, c1);
        let b = self.r_coeff(c0, c1);
        let inv = T::one() / self.h_min;
        let base = k + self.dual + self.delta * (T::one() - T::lit(2.0) * xk);
        let cand = |slope: T, lo: T, hi: T| (self.global - (base + slope) / self.rho).clamp_to(lo, hi);
        let r_lo = |x: T| x.max(self.r + (x - T::one()) * inv);
        let eval = |x: T| {
            let s = BlockState { xhat: x, c0, c1, rr: r_lo(x) };
            self.surrogate(&s, xk)
        };
        let x_kink = if inv - T::one() > T::epsilon() {
            ((inv - self.r) / (inv - T::one())).clamp_to(T::zero(), T::one())
        } else {
            T::one()
        };
        let a = cand(b, T::zero(), x_kink);
        let bb = cand(b * inv, x_kink, T::one());
        let x = if eval(a) <= eval(bb) { a } else { bb };
        (x, r_lo(x))
    }

    /// Stationary `x̂` of the Lagrangian for given multipliers and fixed
    /// splits; `R` enters only through the envelope multipliers.
    pub fn kkt_xhat(&self, c0: T, c1: T, xk: T, m: &Multipliers<T>) -> T {
        let inv = T::one() / self.h_min;
        let g = self.unit_cost(c0, c1) + self.dual + self.delta * (T::one() - T::lit(2.0) * xk) - m.eps + m.phi + m.varpi
            - m.theta * inv
            - m.varrho
            + m.sigma * inv;
        self.global - g / self.rho
    }

    /// Projected subgradient ascent on the six multipliers.
    fn update_multipliers(&self, st: &mut CbgpState<T>, a: T) {
        let step = a / T::from_usize(st.sweeps + 1).unwrap();
        let p = &st.primal;
        let inv = T::one() / self.h_min;
        let up = |m: T, g: T| (m + step * g).max(T::zero());
        let m = &mut st.mult;
        m.eps = up(m.eps, -p.xhat);
        m.phi = up(m.phi, p.xhat - T::one());
        m.varpi = up(m.varpi, p.xhat - p.rr);
        m.theta = up(m.theta, p.rr - p.xhat * inv);
        m.varrho = up(m.varrho, p.rr - (self.r + p.xhat - T::one()));
        m.sigma = up(m.sigma, self.r + p.xhat * inv - inv - p.rr);
    }

    /// Projected gradient step with backtracking on one scalar coordinate.
    fn coordinate_step(
        &self,
        s: &mut BlockState<T>,
        interval: (T, T),
        grad: T,
        get: fn(&BlockState<T>) -> T,
        set: fn(&mut BlockState<T>, T),
    ) {
        let (lo, hi) = interval;
        let cur = get(s).clamp_to(lo, hi);
        if grad == T::zero() || hi <= lo {
            set(s, cur);
            return;
        }
        let f0 = self.objective(s);
        let mut t = (hi - lo) / grad.abs();
        for _ in 0..60 {
            let cand = (cur - t * grad).clamp_to(lo, hi);
            let mut trial = *s;
            set(&mut trial, cand);
            let f = self.objective(&trial);
            if f <= f0 - T::lit(1e-4) * grad * (cur - cand) {
                *s = trial;
                return;
            }
            t = t / T::lit(2.0);
        }
        set(s, cur);
    }

    /// One sweep over `R`, `c0`, `c1`, then `x̂`; multipliers follow.
    pub fn sweep(&self, st: &mut CbgpState<T>, cfg: &CbgpConfig<T>) {
        let s = &mut st.primal;
        // R
        let iv = rlt_bounds(s.xhat, self.r, self.h_min);
        let b = self.r_coeff(s.c0, s.c1);
        let mut rs = *s;
        rs.rr = if b > T::zero() { iv.lo } else { iv.project(s.rr) };
        if self.objective(&rs) <= self.objective(s) {
            *s = rs;
        } else {
            s.rr = iv.project(s.rr);
        }
        // c0
        if let Some(iv) = self.c0_interval(s.c1) {
            let g = self.grad_c0(s);
            self.coordinate_step(s, iv, g, |s| s.c0, |s, v| s.c0 = v);
        }
        // c1
        if let Some(iv) = self.c1_interval(s.c0) {
            let g = self.grad_c1(s);
            self.coordinate_step(s, iv, g, |s| s.c1, |s, v| s.c1 = v);
        }
        // x̂ and R jointly on the surrogate
        st.xk = s.xhat;
        let (x, r) = self.xhat_step(s.c0, s.c1, st.xk);
        let mut next = *s;
        next.xhat = x;
        next.rr = r;
        if self.surrogate(&next, st.xk) <= self.surrogate(s, st.xk) {
            *s = next;
        }
        st.sweeps += 1;
        self.update_multipliers(st, cfg.subgradient_a);
    }

    /// Optimizes `(c0, c1)` with the branch fully selected (`x̂ = 1`, `R = r`).
    pub fn optimize_split(&self, c0: T, c1: T, rounds: usize) -> (T, T) {
        let mut s = BlockState { xhat: T::one(), c0: c0.clamp_to(T::zero(), self.c), c1: T::zero(), rr: self.r };
        s.c1 = c1.clamp_to(T::zero(), self.c - s.c0);
        if self.delay(s.c0, s.c1) > self.t_max {
            let (a, b) = self.fastest_split();
            s.c0 = a;
            s.c1 = b;
        }
        let mut f = self.objective(&s);
        for _ in 0..rounds {
            if let Some(iv) = self.c0_interval(s.c1) {
                let g = self.grad_c0(&s);
                self.coordinate_step(&mut s, iv, g, |s| s.c0, |s, v| s.c0 = v);
            }
            if let Some(iv) = self.c1_interval(s.c0) {
                let g = self.grad_c1(&s);
                self.coordinate_step(&mut s, iv, g, |s| s.c1, |s, v| s.c1 = v);
            }
            let next = self.objective(&s);
            if (f - next).abs() <= T::lit(1e-12) * f.abs().max(T::epsilon()) {
                break;
            }
            f = next;
        }
        (s.c0, s.c1)
    }

    /// Runs sweeps from `init` until the objective settles.
    pub fn solve(&self, init: BlockState<T>, cfg: &CbgpConfig<T>) -> BlockOutcome<T> {
        let feasible = self.deadline_feasible();
        let mut primal = init;
        primal.c0 = primal.c0.clamp_to(T::zero(), self.c);
        primal.c1 = primal.c1.clamp_to(T::zero(), self.c - primal.c0);
        if feasible && self.delay(primal.c0, primal.c1) > self.t_max {
            let (c0, c1) = self.fastest_split();
            primal.c0 = c0;
            primal.c1 = c1;
        }
        if !feasible {
            primal.xhat = T::zero();
        }
        primal.xhat = primal.xhat.clamp_to(T::zero(), T::one());
        primal.rr = rlt_bounds(primal.xhat, self.r, self.h_min).project(primal.rr);
        let mut st = CbgpState { primal, mult: Multipliers::default(), xk: primal.xhat, sweeps: 0 };
        let mut history = vec![self.objective(&st.primal)];
        for _ in 0..cfg.rounds {
            let before = st;
            self.sweep(&mut st, cfg);
            if !feasible {
                st.primal.xhat = T::zero();
                st.primal.rr = T::zero();
            }
            let f = self.objective(&st.primal);
            let prev = *history.last().unwrap();
            if f > prev + T::lit(1e-12) * prev.abs().max(T::one()) {
                st = before;
                break;
            }
            history.push(f);
            if (prev - f).abs() <= cfg.tol * prev.abs().max(T::one()) {
                break;
            }
        }
        if feasible && st.primal.xhat == T::zero() {
            // the objective is flat in the split; keep the one this branch would use
            let (c0, c1) = self.optimize_split(st.primal.c0, st.primal.c1, cfg.rounds);
            st.primal.c0 = c0;
            st.primal.c1 = c1;
        }
        let p = st.primal;
        let split = SplitAllocation {
            c0: p.c0,
            c1: p.c1,
            ci: (self.c - p.c0 - p.c1).max(T::zero()),
            h: T::one() / self.r,
            r: self.r,
            rr: p.rr,
            h_min: self.h_min,
        };
        BlockOutcome { state: st, split, history, deadline_feasible: feasible }
    }
}

/// Minimizer over `v ∈ {0, 1}` of `cost·v + dual·(v - global) + ρ/2 (v - global)²`.
/// Ties go to 0.
pub fn two_point<T: Real>(cost: T, dual: T, global: T, rho: T) -> T {
    let f = |v: T| cost * v + dual * (v - global) + rho / T::lit(2.0) * (v - global) * (v - global);
    if f(T::one()) < f(T::zero()) {
        T::one()
    } else {
        T::zero()
    }
}

/// Consensus data of one scalar block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusSlot<T> {
    pub global: T,
    pub dual: T,
}

/// Local-execution block.
pub fn solve_local_block<T: Real>(
    task: &Task<T>,
    scenario: &Scenario<T>,
    slot: ConsensusSlot<T>,
    rho: T,
    weights: UtilityWeights<T>,
    scale: T,
) -> T {
    let c = local_cost(task, &scenario.device);
    if c.delay > task.t_max {
        return T::zero();
    }
    two_point(scale * c.weighted(weights), slot.dual, slot.global, rho)
}

/// Direct MBS block.
pub fn solve_mbs_block<T: Real>(
    task: &Task<T>,
    scenario: &Scenario<T>,
    slot: ConsensusSlot<T>,
    rho: T,
    weights: UtilityWeights<T>,
    scale: T,
) -> T {
    match mbs_cost(task, scenario) {
        Ok(c) if c.delay <= task.t_max => two_point(scale * c.weighted(weights), slot.dual, slot.global, rho),
        _ => T::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};
    use proptest::prelude::*;

    #[test]
    fn rlt_examples() {
        let b = rlt_bounds::<f64>(1.0, 2.0, 0.2);
        assert_eq!((b.lo, b.hi), (2.0, 2.0));
        let b = rlt_bounds(0.0, 2.0, 0.2);
        assert_eq!((b.lo, b.hi), (0.0, 0.0));
        let b = rlt_bounds::<f64>(0.5, 2.0, 0.2);
        assert!((b.lo - 0.5).abs() < 1e-15 && (b.hi - 1.5).abs() < 1e-15);
        assert_eq!(b.project(3.0), b.hi);
        assert!(!b.empty);
    }

    #[test]
    fn majorize_examples() {
        assert!((majorize_penalty::<f64>(0.5, 0.8) - 0.25).abs() < 1e-15);
        assert_eq!(majorize_penalty(0.3, 0.3), 0.3 - 0.09);
        assert_eq!(majorize_penalty(0.0, 1.0), 1.0);
    }

    #[test]
    fn two_point_examples() {
        // positive cost, z = 0, no dual
        assert_eq!(two_point(1.0, 0.0, 0.0, 1.0), 0.0);
        // dual pulls the task local despite its cost
        assert_eq!(two_point(22.518, -30.0, 1.0, 1.0), 1.0);
        let f = |v: f64| 22.518 * v - 30.0 * (v - 1.0) + 0.5 * (v - 1.0) * (v - 1.0);
        assert!((f(1.0) - f(0.0) - (22.518 - 30.0 - 0.5)).abs() < 1e-12);
        // prox dominance rounds the global value
        assert_eq!(two_point(1.0, 0.0, 0.7, 1e9), 1.0);
        assert_eq!(two_point(1.0, 0.0, 0.3, 1e9), 0.0);
        // zero cost at y = 0 stays off
        assert_eq!(two_point(0.0, 0.0, 0.0, 1.0), 0.0);
        assert_eq!(two_point(5.0, -100.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn two_point_blocks_respect_deadline() {
        let mut s: Scenario<f64> = generate_scenario(&ScenarioConfig { n_tasks: 1, n_sbs: 1, ..Default::default() }).unwrap();
        let w = UtilityWeights::new(0.5).unwrap();
        let pull = ConsensusSlot { global: 1.0, dual: -1e6 };
        assert_eq!(solve_local_block(&s.tasks[0], &s, pull, 1.0, w, 1.0), 1.0);
        assert_eq!(solve_mbs_block(&s.tasks[0], &s, pull, 1.0, w, 1.0), 1.0);
        s.tasks[0].t_max = 1e-9;
        assert_eq!(solve_local_block(&s.tasks[0], &s, pull, 1.0, w, 1.0), 0.0);
        assert_eq!(solve_mbs_block(&s.tasks[0], &s, pull, 1.0, w, 1.0), 0.0);
    }

    pub(crate) fn block(seed: u64, alpha: f64) -> ThreeTierBlock<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h_min = rng.gen_range(0.05..0.5);
        let r = rng.gen_range(1.0..1.0 / h_min);
        ThreeTierBlock {
            c: rng.gen_range(1e3..1e6),
            u: 18_000.0,
            t_max: rng.gen_range(1.0..30.0),
            f_local: 5e9,
            f_sbs: 2e10,
            f_mbs: 1e11,
            e_local: 1e-11,
            e_sbs: 1e-9,
            e_mbs: 2e-9,
            p_user: 0.1,
            p_relay: 1.0,
            rate: rng.gen_range(1e6..1e9),
            relay: QuadraticDelay { quad: 1e-9, lin: 1e-6 + 2e-8 },
            other_load: rng.gen_range(0.0..1e4),
            alpha,
            scale: rng.gen_range(0.1..100.0),
            rho: rng.gen_range(0.5..2.0),
            dual: rng.gen_range(-1.0..1.0),
            global: rng.gen_range(0.0..1.0),
            r,
            h_min,
            delta: rng.gen_range(0.0..2.0),
        }
    }

    fn start(b: &ThreeTierBlock<f64>) -> BlockState<f64> {
        BlockState { xhat: b.global, c0: b.c / 3.0, c1: b.c / 3.0, rr: b.global * b.r }
    }

    #[test]
    fn sweeps_never_increase_objective() {
        let cfg = CbgpConfig::default();
        for seed in 0..200 {
            let b = block(seed, 0.3 + 0.4 * ((seed % 3) as f64) / 2.0);
            let out = b.solve(start(&b), &cfg);
            for w in out.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "seed {seed}: {:?}", out.history);
            }
            assert!(out.state.mult.all_nonnegative());
        }
    }

    #[test]
    fn solution_meets_deadline_and_envelope() {
        let cfg = CbgpConfig::default();
        for seed in 0..200 {
            let b = block(seed, 0.5);
            let out = b.solve(start(&b), &cfg);
            let p = out.state.primal;
            if out.deadline_feasible {
                assert!(b.delay(p.c0, p.c1) <= b.t_max * (1.0 + 1e-9), "seed {seed}");
            } else {
                assert_eq!(p.xhat, 0.0);
            }
            let iv = rlt_bounds(p.xhat, b.r, b.h_min);
            assert!(p.rr >= iv.lo - 1e-12 && p.rr <= iv.hi + 1e-12);
            assert!(out.split.validate(b.c).is_ok(), "seed {seed}: {:?}", out.split);
        }
    }

    #[test]
    fn kkt_closed_form_reproduces_xhat_step() {
        let mut checked = 0;
        for seed in 0..300 {
            let mut b = block(seed, 0.5);
            let (c0, c1, xk) = (b.c / 4.0, b.c / 5.0, 0.4);
            // keep costs on the scale of the proximal term so x̂ lands inside
            b.scale *= 0.3 / (b.unit_cost(c0, c1) + b.r_coeff(c0, c1));
            let (x, rr) = b.xhat_step(c0, c1, xk);
            if x <= 1e-9 || x >= 1.0 - 1e-9 {
                continue;
            }
            let inv = 1.0 / b.h_min;
            let coeff = b.r_coeff(c0, c1);
            let on_first = (rr - x).abs() < 1e-12;
            let on_second = (rr - (b.r + (x - 1.0) * inv)).abs() < 1e-12;
            if on_first == on_second {
                continue; // kink: multipliers not unique
            }
            let mut m = Multipliers::default();
            if on_first {
                m.varpi = coeff;
            } else {
                m.sigma = coeff;
            }
            assert!((b.kkt_xhat(c0, c1, xk, &m) - x).abs() < 1e-9, "seed {seed}");
            checked += 1;
        }
        assert!(checked > 50, "{checked}");
    }

    #[test]
    fn matches_grid_search_when_delay_dominates() {
        // single block, x̂ pinned at 1, delay-only cost
        let cfg = CbgpConfig { rounds: 500, tol: 1e-12, ..Default::default() };
        for seed in 0..20 {
            let mut b = block(seed, 1.0);
            b.t_max = 1e9;
            b.delta = 0.0;
            b.global = 1.0;
            b.dual = -1e9;
            b.rho = 1.0;
            let out = b.solve(BlockState { xhat: 1.0, c0: b.c / 3.0, c1: b.c / 3.0, rr: b.r }, &cfg);
            let p = out.state.primal;
            let f = |c0: f64, c1: f64| b.unit_cost(c0, c1) + b.r_coeff(c0, c1) * b.r;
            let got = f(p.c0, p.c1);
            let n = 100;
            let mut best = f64::INFINITY;
            for a in 0..=n {
                for k in 0..=(n - a) {
                    best = best.min(f(b.c * a as f64 / n as f64, b.c * k as f64 / n as f64));
                }
            }
            assert!(got <= best * 1.02 + 1e-15, "seed {seed}: {got} vs grid {best}");
        }
    }

    #[test]
    fn zero_size_task() {
        let mut b = block(1, 0.5);
        b.c = 0.0;
        b.other_load = 0.0;
        b.dual = 0.0;
        b.delta = 0.0;
        let out = b.solve(BlockState { xhat: 0.5, c0: 0.0, c1: 0.0, rr: 0.5 }, &CbgpConfig::default());
        assert_eq!((out.split.c0, out.split.c1, out.split.ci), (0.0, 0.0, 0.0));
        assert!((out.state.primal.xhat - b.global).abs() < 1e-9, "{out:?} {b:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn rlt_exact_at_binary(r_frac in 0.0f64..=1.0, h_min in 1e-3f64..=1.0) {
            let r = 1.0 + r_frac * (1.0 / h_min - 1.0);
            let one = rlt_bounds(1.0, r, h_min);
            prop_assert_eq!((one.lo, one.hi), (r, r));
            let zero = rlt_bounds(0.0, r, h_min);
            prop_assert_eq!((zero.lo, zero.hi), (0.0, 0.0));
        }

        #[test]
        fn majorizer_upper_bounds_penalty(xk in 0.0f64..=1.0, x in 0.0f64..=1.0) {
            prop_assert!(majorize_penalty(xk, x) >= x - x * x - 1e-15);
            prop_assert!((majorize_penalty(xk, xk) - (xk - xk * xk)).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_idempotent(x in 0.0f64..=1.0, r_frac in 0.0f64..=1.0, h_min in 0.01f64..=1.0, v in -10.0f64..10.0) {
            let r = 1.0 + r_frac * (1.0 / h_min - 1.0);
            let iv = rlt_bounds(x, r, h_min);
            let p = iv.project(v);
            prop_assert_eq!(iv.project(p), p);
            prop_assert!(!iv.empty);
        }
    }
}
