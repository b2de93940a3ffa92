//! Global consensus block of one task: log-barrier and concave-penalty
//! smoothing of the binary variables, a slack for the deadline, and
//! equality-constrained Newton steps solved in the null space of the
//! constraints.

use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, CgOutcome};
use crate::num::{dot, Real};

/// Barrier, penalty and Newton settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalConfig<T> {
    pub omega0: T,
    pub omega_factor: T,
    pub omega_floor: T,
    pub xi0: T,
    pub xi_factor: T,
    pub xi_cap: T,
    pub newton_iters: usize,
    /// Infinity norm of the KKT residual that ends a barrier round.
    pub newton_tol: T,
    /// Interior margin kept by the line search.
    pub margin: T,
    pub armijo: T,
    pub cg_tol: T,
}

impl<T: Real> Default for GlobalConfig<T> {
    fn default() -> Self {
        Self {
            omega0: T::one(),
            omega_factor: T::lit(0.1),
            omega_floor: T::lit(1e-6),
            xi0: T::lit(0.1),
            xi_factor: T::lit(2.0),
            xi_cap: T::lit(100.0),
            newton_iters: 50,
            newton_tol: T::lit(1e-8),
            margin: T::lit(1e-9),
            armijo: T::lit(1e-4),
            cg_tol: T::lit(1e-10),
        }
    }
}

/// Data of the global block of one task. Variables are ordered
/// `[x_1 .. x_S, y, z]`, followed by the slack `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGlobalProblem<T> {
    /// Local copies, same order as the variables.
    pub local: Vec<T>,
    /// Consensus duals of `local - v`.
    pub dual: Vec<T>,
    /// Delay of each branch, seconds.
    pub delay: Vec<T>,
    pub t_max: T,
    pub rho: T,
    /// Whether the deadline row is part of the system.
    pub deadline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSolverState<T> {
    pub v: Vec<T>,
    pub m: T,
    /// Multiplier of the deadline row.
    pub nu: T,
    /// Multiplier of the simplex row.
    pub varsigma: T,
    pub omega: T,
    pub xi: T,
}

/// Primal and multiplier step of one Newton iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonStep<T> {
    pub dv: Vec<T>,
    pub dm: T,
    pub dnu: T,
    pub dvarsigma: T,
    /// Diagonal shift that made the reduced Hessian positive definite.
    pub shift: T,
}

/// Diagonal Hessian, gradient and constraint data at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSystem<T> {
    /// Diagonal of the Hessian over `[v, m]`.
    pub hess: Vec<T>,
    /// Negated gradient over `[v, m]`.
    pub rhs: Vec<T>,
    /// Deadline row over `[v, m]`.
    pub deadline_row: Vec<T>,
    /// Simplex row over `[v, m]`.
    pub simplex_row: Vec<T>,
    /// Deadline and simplex residuals.
    pub residual: (T, T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundInfo<T> {
    pub omega: T,
    pub xi: T,
    pub newton_iters: usize,
    pub objective: T,
    pub kkt_norm: T,
    pub stalled: bool,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOutcome<T> {
    pub state: GlobalSolverState<T>,
    pub rounds: Vec<RoundInfo<T>>,
    /// Every barrier round met the KKT tolerance.
    pub converged: bool,
}

impl<T: Real> TaskGlobalProblem<T> {
    /// Builds the problem, capping branch delays at `10·t_max` and dropping
    /// the deadline row when no branch meets it.
    pub fn new(local: Vec<T>, dual: Vec<T>, delay: Vec<T>, t_max: T, rho: T) -> Self {
        let cap = T::lit(10.0) * t_max;
        let delay: Vec<T> = delay.into_iter().map(|d| if d.is_finite() { d.min(cap) } else { cap }).collect();
        let deadline = delay.iter().any(|&d| d < t_max);
        Self { local, dual, delay, t_max, rho, deadline }
    }

    pub fn n(&self) -> usize {
        self.local.len()
    }

    fn z_index(&self) -> usize {
        self.n() - 1
    }

    /// Interior start from the local copies: clamp to `[0.01, 0.99]`, renormalize.
    pub fn initial_state(&self, cfg: &GlobalConfig<T>) -> GlobalSolverState<T> {
        let lo = T::lit(0.01);
        let hi = T::lit(0.99);
        let mut v: Vec<T> = self.local.iter().map(|&x| x.clamp_to(lo, hi)).collect();
        let s: T = v.iter().copied().sum();
        v.iter_mut().for_each(|x| *x = *x / s);
        let used = dot(&self.delay, &v);
        let m = (self.t_max - used).max(lo);
        GlobalSolverState { v, m, nu: T::zero(), varsigma: T::zero(), omega: cfg.omega0, xi: cfg.xi0 }
    }

    /// Prox, dual, barrier and penalty terms.
    pub fn smoothed_objective(&self, st: &GlobalSolverState<T>) -> Result<T> {
        let mut f = T::zero();
        for k in 0..self.n() {
            let v = st.v[k];
            if !(v > T::zero() && v < T::one()) {
                return Err(Error::Domain(format!("variable {k} = {v} outside (0, 1)")));
            }
            let d = self.local[k] - v;
            f = f + self.dual[k] * d + self.rho / T::lit(2.0) * d * d - st.omega * (v.ln() + (T::one() - v).ln())
                + st.xi * v * (T::one() - v);
        }
        if self.deadline {
            if !(st.m > T::zero()) {
                return Err(Error::Domain(format!("slack {} must be positive", st.m)));
            }
            f = f - st.omega * st.m.ln();
        }
        Ok(f)
    }

    /// Gradient over `[v, m]`.
    pub fn gradient(&self, st: &GlobalSolverState<T>) -> Vec<T> {
        let mut g: Vec<T> = (0..self.n())
            .map(|k| {
                let v = st.v[k];
                -self.dual[k] - self.rho * (self.local[k] - v) - st.omega * (T::one() / v - T::one() / (T::one() - v))
                    + st.xi * (T::one() - T::lit(2.0) * v)
            })
            .collect();
        g.push(if self.deadline { -st.omega / st.m } else { T::zero() });
        g
    }

    /// Diagonal Hessian over `[v, m]`.
    pub fn hessian_diag(&self, st: &GlobalSolverState<T>) -> Vec<T> {
        let mut h: Vec<T> = st
            .v
            .iter()
            .map(|&v| {
                let w = T::one() - v;
                self.rho + st.omega * (T::one() / (v * v) + T::one() / (w * w)) - T::lit(2.0) * st.xi
            })
            .collect();
        h.push(if self.deadline { st.omega / (st.m * st.m) } else { T::zero() });
        h
    }

    fn rows(&self) -> (Vec<T>, Vec<T>) {
        let mut d = self.delay.clone();
        d.push(if self.deadline { T::one() } else { T::zero() });
        let mut s = vec![T::one(); self.n()];
        s.push(T::zero());
        (d, s)
    }

    /// Deadline and simplex residuals.
    pub fn residuals(&self, st: &GlobalSolverState<T>) -> (T, T) {
        let rd = if self.deadline { dot(&self.delay, &st.v) + st.m - self.t_max } else { T::zero() };
        let rs = st.v.iter().copied().sum::<T>() - T::one();
        (rd, rs)
    }

    pub fn assemble_newton(&self, st: &GlobalSolverState<T>) -> NewtonSystem<T> {
        let (deadline_row, simplex_row) = self.rows();
        NewtonSystem {
            hess: self.hessian_diag(st),
            rhs: self.gradient(st).into_iter().map(|g| -g).collect(),
            deadline_row,
            simplex_row,
            residual: self.residuals(st),
        }
    }

    /// Stationarity rows followed by the deadline and simplex rows.
    pub fn kkt_residual(&self, st: &GlobalSolverState<T>) -> Vec<T> {
        let (d, s) = self.rows();
        let mut r: Vec<T> =
            self.gradient(st).iter().zip(d.iter().zip(&s)).map(|(&g, (&a, &b))| g + st.nu * a + st.varsigma * b).collect();
        if !self.deadline {
            let last = r.len() - 1;
            r[last] = T::zero();
        }
        let (rd, rs) = self.residuals(st);
        r.push(rd);
        r.push(rs);
        r
    }

    /// Least-squares multipliers for the current gradient.
    pub fn fit_multipliers(&self, st: &mut GlobalSolverState<T>) {
        let g = self.gradient(st);
        let (nu, vs) = self.solve_multipliers(&g);
        st.nu = nu;
        st.varsigma = vs;
    }

    /// Solves `min ‖w + ν a + ς s‖` over the rows.
    fn solve_multipliers(&self, w: &[T]) -> (T, T) {
        let (a, s) = self.rows();
        if !self.deadline {
            let ss = dot(&s, &s);
            return (T::zero(), -dot(&s, w) / ss);
        }
        let (aa, as_, ss) = (dot(&a, &a), dot(&a, &s), dot(&s, &s));
        let (aw, sw) = (dot(&a, w), dot(&s, w));
        let det = aa * ss - as_ * as_;
        if det.abs() <= T::epsilon() * aa * ss {
            return (T::zero(), -sw / ss);
        }
        ((-aw * ss + sw * as_) / det, (-sw * aa + aw * as_) / det)
    }

    /// Newton step of the equality-constrained smoothed problem.
    ///
    /// The deadline row is pivoted on `m` and the simplex row on `z`; the
    /// free directions are `e_k - e_z - (a_k - a_z) e_m`.
    pub fn newton_step(&self, st: &GlobalSolverState<T>, cfg: &GlobalConfig<T>) -> Result<NewtonStep<T>> {
        let sys = self.assemble_newton(st);
        let n = self.n();
        let zi = self.z_index();
        let mi = n;
        let a = &self.delay;
        let az = a[zi];
        let dl = if self.deadline { T::one() } else { T::zero() };
        let (rd, rs) = sys.residual;

        // particular step restoring both rows
        let mut dp = vec![T::zero(); n + 1];
        dp[zi] = -rs;
        dp[mi] = dl * (-rd + az * rs);

        let free: Vec<usize> = (0..n).filter(|&k| k != zi).collect();
        let expand = |x: &[T], out: &mut [T]| {
            out.iter_mut().for_each(|o| *o = T::zero());
            let mut sz = T::zero();
            let mut sm = T::zero();
            for (&k, &xi) in free.iter().zip(x) {
                out[k] = xi;
                sz = sz + xi;
                sm = sm + (a[k] - az) * xi;
            }
            out[zi] = -sz;
            out[mi] = -dl * sm;
        };
        let reduce = |q: &[T], out: &mut [T]| {
            for (o, &k) in out.iter_mut().zip(&free) {
                *o = q[k] - q[zi] - dl * (a[k] - az) * q[mi];
            }
        };

        let mut shift = T::zero();
        loop {
            let h: Vec<T> = sys.hess.iter().map(|&h| h + shift).collect();
            // b = Zᵀ(rhs - H dp)
            let t: Vec<T> = (0..=n).map(|i| sys.rhs[i] - h[i] * dp[i]).collect();
            let mut b = vec![T::zero(); free.len()];
            reduce(&t, &mut b);
            let apply = |x: &[T], out: &mut [T]| {
                let mut w = vec![T::zero(); n + 1];
                expand(x, &mut w);
                for (wi, &hi) in w.iter_mut().zip(&h) {
                    *wi = *wi * hi;
                }
                reduce(&w, out);
            };
            let outcome = conjugate_gradient(apply, &b, cfg.cg_tol, 4 * free.len().max(1));
            let x = match outcome {
                CgOutcome::Converged { x, .. } => Some(x),
                CgOutcome::MaxIterations { x, residual } if residual < T::lit(1e-6) => Some(x),
                _ => None,
            };
            if let Some(x) = x {
                let mut dv = vec![T::zero(); n + 1];
                expand(&x, &mut dv);
                for (d, p) in dv.iter_mut().zip(&dp) {
                    *d = *d + *p;
                }
                // multipliers from H dv + Aᵀ λ = rhs - Aᵀ λ_cur
                let (d_row, s_row) = self.rows();
                let w: Vec<T> = (0..=n)
                    .map(|i| h[i] * dv[i] - sys.rhs[i] + st.nu * d_row[i] + st.varsigma * s_row[i])
                    .collect();
                let (dnu, dvs) = self.solve_multipliers(&w);
                let dm = dv.pop().unwrap();
                return Ok(NewtonStep { dv, dm, dnu: if self.deadline { dnu } else { T::zero() }, dvarsigma: dvs, shift });
            }
            shift = if shift == T::zero() { T::lit(1e-6) } else { shift * T::lit(2.0) };
            if !shift.is_finite() || shift > T::lit(1e30) {
                return Err(Error::Domain("reduced Hessian could not be regularized".into()));
            }
        }
    }

    fn merit(&self, st: &GlobalSolverState<T>, mu: T) -> Result<T> {
        let (rd, rs) = self.residuals(st);
        Ok(self.smoothed_objective(st)? + mu * (rd.abs() + rs.abs()))
    }

    fn stepped(&self, st: &GlobalSolverState<T>, step: &NewtonStep<T>, t: T) -> GlobalSolverState<T> {
        let mut next = st.clone();
        for (v, d) in next.v.iter_mut().zip(&step.dv) {
            *v = *v + t * *d;
        }
        if self.deadline {
            next.m = st.m + t * step.dm;
        }
        next
    }

    fn interior(&self, st: &GlobalSolverState<T>, margin: T) -> bool {
        st.v.iter().all(|&v| v > margin && v < T::one() - margin) && (!self.deadline || st.m > margin)
    }

    /// Backtracking from `t = 1` by halves: interior with margin and
    /// Armijo decrease of the objective plus an exact penalty on the rows.
    pub fn line_search(&self, st: &GlobalSolverState<T>, step: &NewtonStep<T>, cfg: &GlobalConfig<T>) -> Result<T> {
        let mu = (st.nu + step.dnu).abs().max((st.varsigma + step.dvarsigma).abs()) * T::lit(1.5) + T::one();
        let f0 = self.merit(st, mu)?;
        let g = self.gradient(st);
        let (rd, rs) = self.residuals(st);
        let mut dir = dot(&g[..self.n()], &step.dv) - mu * (rd.abs() + rs.abs());
        if self.deadline {
            dir = dir + g[self.n()] * step.dm;
        }
        let slope = dir.min(T::zero());
        let mut t = T::one();
        while t >= T::lit(1e-12) {
            let next = self.stepped(st, step, t);
            if self.interior(&next, cfg.margin) {
                let f = self.merit(&next, mu)?;
                if f <= f0 + cfg.armijo * t * slope {
                    return Ok(t);
                }
            }
            t = t / T::lit(2.0);
        }
        Err(Error::StalledLineSearch(t.as_f64()))
    }

    fn kkt_norm(&self, st: &GlobalSolverState<T>) -> T {
        self.kkt_residual(st).iter().fold(T::zero(), |m, &r| m.max(r.abs()))
    }

    /// Runs the barrier/penalty schedule from `init`.
    pub fn solve_from(&self, init: GlobalSolverState<T>, cfg: &GlobalConfig<T>) -> GlobalOutcome<T> {
        let mut st = init;
        st.omega = cfg.omega0;
        st.xi = cfg.xi0;
        self.fit_multipliers(&mut st);
        let mut rounds = Vec::new();
        let mut converged = true;
        loop {
            let mut iters = 0;
            let mut stalled = false;
            while iters < cfg.newton_iters {
                if self.kkt_norm(&st) <= cfg.newton_tol {
                    break;
                }
                let step = match self.newton_step(&st, cfg) {
                    Ok(s) => s,
                    Err(_) => {
                        stalled = true;
                        break;
                    }
                };
                match self.line_search(&st, &step, cfg) {
                    Ok(t) => {
                        st = self.stepped(&st, &step, t);
                        st.nu = st.nu + t * step.dnu;
                        st.varsigma = st.varsigma + t * step.dvarsigma;
                    }
                    Err(_) => {
                        stalled = true;
                        break;
                    }
                }
                iters += 1;
            }
            let kkt = self.kkt_norm(&st);
            if kkt > cfg.newton_tol {
                converged = false;
            }
            rounds.push(RoundInfo {
                omega: st.omega,
                xi: st.xi,
                newton_iters: iters,
                objective: self.smoothed_objective(&st).unwrap_or(T::infinity()),
                kkt_norm: kkt,
                stalled,
                v: st.v.clone(),
            });
            if st.omega <= cfg.omega_floor {
                break;
            }
            st.omega = (st.omega * cfg.omega_factor).max(cfg.omega_floor);
            st.xi = (st.xi * cfg.xi_factor).min(cfg.xi_cap);
        }
        GlobalOutcome { state: st, rounds, converged }
    }

    pub fn solve(&self, cfg: &GlobalConfig<T>) -> GlobalOutcome<T> {
        self.solve_from(self.initial_state(cfg), cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tests::dense_solve;
    use rand::{Rng, SeedableRng};

    fn random_problem(rng: &mut impl Rng, n_sbs: usize) -> TaskGlobalProblem<f64> {
        let n = n_sbs + 2;
        let t_max = rng.gen_range(1.0..30.0);
        TaskGlobalProblem::new(
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.gen_range(0.01..2.0) * t_max).collect(),
            t_max,
            rng.gen_range(0.5..2.0),
        )
    }

    fn random_state(rng: &mut impl Rng, p: &TaskGlobalProblem<f64>) -> GlobalSolverState<f64> {
        let mut v: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        GlobalSolverState {
            v,
            m: rng.gen_range(0.1..5.0),
            nu: rng.gen_range(-1.0..1.0),
            varsigma: rng.gen_range(-1.0..1.0),
            omega: rng.gen_range(1e-3..1.0),
            xi: rng.gen_range(0.0..2.0),
        }
    }

    #[test]
    fn symmetric_point_objective() {
        let p = TaskGlobalProblem { local: vec![0.5; 3], dual: vec![0.0; 3], delay: vec![1.0; 3], t_max: 10.0, rho: 1.0, deadline: false };
        let st = GlobalSolverState { v: vec![0.5; 3], m: 1.0, nu: 0.0, varsigma: 0.0, omega: 1.0, xi: 0.0 };
        let f = p.smoothed_objective(&st).unwrap();
        assert!((f - 3.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
        let mut edge = st.clone();
        edge.v[0] = 0.0;
        assert!(matches!(p.smoothed_objective(&edge), Err(Error::Domain(_))));
        let mut near = st.clone();
        near.v[0] = 1e-300;
        assert!(p.smoothed_objective(&near).unwrap() > 600.0);
    }

    #[test]
    fn hessian_examples() {
        let p = TaskGlobalProblem::<f64> { local: vec![0.3], dual: vec![0.0], delay: vec![1.0], t_max: 10.0, rho: 1.5, deadline: false };
        let st = GlobalSolverState { v: vec![0.5], m: 1.0, nu: 0.0, varsigma: 0.0, omega: 0.0, xi: 0.0 };
        assert_eq!(p.hessian_diag(&st)[0], 1.5);
        let p = TaskGlobalProblem { rho: 0.0, ..p };
        let st = GlobalSolverState { omega: 1.0, ..st };
        assert!((p.hessian_diag(&st)[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n_sbs = rng.gen_range(1..4);
            let p = random_problem(&mut rng, n_sbs);
            let st = random_state(&mut rng, &p);
            let g = p.gradient(&st);
            let h = p.hessian_diag(&st);
            for k in 0..=p.n() {
                if k == p.n() && !p.deadline {
                    continue;
                }
                let e = 1e-6 * if k < p.n() { st.v[k].min(1.0 - st.v[k]) } else { st.m };
                let shift = |d: f64| {
                    let mut s = st.clone();
                    if k < p.n() {
                        s.v[k] += d;
                    } else {
                        s.m += d;
                    }
                    s
                };
                let f = |d: f64| p.smoothed_objective(&shift(d)).unwrap();
                let fd = (f(e) - f(-e)) / (2.0 * e);
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "grad {k}: {fd} vs {}", g[k]);
                let gk = |d: f64| p.gradient(&shift(d))[k];
                let hd = (gk(e) - gk(-e)) / (2.0 * e);
                assert!((hd - h[k]).abs() <= 1e-4 * h[k].abs().max(1.0), "hess {k}: {hd} vs {}", h[k]);
            }
        }
    }

    #[test]
    fn kkt_residual_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = random_problem(&mut rng, 2);
        let mut st = random_state(&mut rng, &p);
        let k = p.kkt_residual(&st);
        assert!(k[p.n() + 2].abs() < 1e-12);
        st.v[0] += 0.1;
        let k = p.kkt_residual(&st);
        assert!((k[p.n() + 2] - 0.1).abs() < 1e-12);
    }

    /// Dense KKT matrix `[H Aᵀ; A 0]` and its right-hand side.
    fn dense_kkt(p: &TaskGlobalProblem<f64>, st: &GlobalSolverState<f64>, shift: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let sys = p.assemble_newton(st);
        let n1 = p.n() + 1;
        let dim = n1 + 2;
        let mut a = vec![vec![0.0; dim]; dim];
        let mut b = vec![0.0; dim];
        for i in 0..n1 {
            a[i][i] = sys.hess[i] + shift;
            a[i][n1] = sys.deadline_row[i];
            a[n1][i] = sys.deadline_row[i];
            a[i][n1 + 1] = sys.simplex_row[i];
            a[n1 + 1][i] = sys.simplex_row[i];
            b[i] = sys.rhs[i] - st.nu * sys.deadline_row[i] - st.varsigma * sys.simplex_row[i];
        }
        b[n1] = -sys.residual.0;
        b[n1 + 1] = -sys.residual.1;
        (a, b)
    }

    #[test]
    fn nullspace_step_solves_full_system() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = GlobalConfig::default();
        let mut tested = 0;
        for _ in 0..100 {
            let n_sbs = rng.gen_range(1..4);
            let mut p = random_problem(&mut rng, n_sbs);
            p.deadline = true;
            let mut st = random_state(&mut rng, &p);
            // deadline row off by a little, simplex exact
            st.m = (p.t_max - dot(&p.delay, &st.v)).abs() + 0.5;
            let step = p.newton_step(&st, &cfg).unwrap();
            let simplex: f64 = step.dv.iter().sum();
            assert!(simplex.abs() < 1e-10);
            let (rd, _) = p.residuals(&st);
            let deadline = dot(&p.delay, &step.dv) + step.dm;
            assert!((deadline + rd).abs() < 1e-10 * rd.abs().max(1.0));

            let (a, b) = dense_kkt(&p, &st, step.shift);
            let mut sol = step.dv.clone();
            sol.push(step.dm);
            sol.push(step.dnu);
            sol.push(step.dvarsigma);
            let res: Vec<f64> = a.iter().zip(&b).map(|(row, &bi)| dot(row, &sol) - bi).collect();
            let rel = crate::num::norm2(&res) / crate::num::norm2(&b).max(1e-300);
            assert!(rel < 1e-8, "relative residual {rel}");
            if step.shift == 0.0 {
                let direct = dense_solve(&a, &b);
                let err: f64 = sol.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let scale = direct.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
                assert!(err <= 1e-8 * scale, "{err}");
                tested += 1;
            }
        }
        assert!(tested > 20);
    }

    #[test]
    fn line_search_halves_out_of_box_step() {
        let p = TaskGlobalProblem { local: vec![0.9, 0.1], dual: vec![0.0; 2], delay: vec![1.0; 2], t_max: 10.0, rho: 1.0, deadline: false };
        let st = GlobalSolverState { v: vec![0.5, 0.5], m: 1.0, nu: 0.0, varsigma: 0.0, omega: 1e-3, xi: 0.0 };
        // t = 1 leaves the box, t = 0.5 lands at (0.8, 0.2)
        let step = NewtonStep { dv: vec![0.6, -0.6], dm: 0.0, dnu: 0.0, dvarsigma: 0.0, shift: 0.0 };
        let t = p.line_search(&st, &step, &GlobalConfig::default()).unwrap();
        assert_eq!(t, 0.5);
        let zero = NewtonStep { dv: vec![0.0, 0.0], ..step };
        assert_eq!(p.line_search(&st, &zero, &GlobalConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn accepted_steps_decrease_objective_and_keep_simplex() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = GlobalConfig::default();
        for _ in 0..50 {
            let p = random_problem(&mut rng, 2);
            let mut st = p.initial_state(&cfg);
            p.fit_multipliers(&mut st);
            for _ in 0..10 {
                let (rd, _) = p.residuals(&st);
                let Ok(step) = p.newton_step(&st, &cfg) else { break };
                let Ok(t) = p.line_search(&st, &step, &cfg) else { break };
                let next = p.stepped(&st, &step, t);
                if rd.abs() < 1e-12 && step.dv.iter().any(|d| d.abs() > 1e-9) {
                    let (a, b) = (p.smoothed_objective(&next).unwrap(), p.smoothed_objective(&st).unwrap());
                    // strict up to rounding near the optimum
                    assert!(a < b || a - b <= 1e-14 * b.abs(), "{a} {b} t={t}");
                }
                assert!((next.v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                st = next;
                st.nu += t * step.dnu;
                st.varsigma += t * step.dvarsigma;
            }
        }
    }

    #[test]
    fn attracted_to_feasible_binary_copies() {
        let p = TaskGlobalProblem::<f64>::new(vec![0.0, 1.0, 0.0], vec![0.0; 3], vec![1.0, 2.0, 3.0], 10.0, 1.0);
        let out = p.solve(&GlobalConfig::default());
        for (v, l) in out.state.v.iter().zip(&p.local) {
            assert!((v - l).abs() < 1e-3, "{:?}", out.state.v);
        }
    }

    #[test]
    fn binding_deadline_selects_feasible_branch() {
        // only the second branch (MBS) meets the deadline
        let p = TaskGlobalProblem::new(vec![1.0, 0.0, 1.0], vec![0.0; 3], vec![50.0, 0.5, 40.0], 1.0, 1.0);
        let out = p.solve(&GlobalConfig::default());
        assert!(out.state.v[1] > 0.97, "{:?}", out.state.v);
    }

    #[test]
    fn one_task_matches_grid_search() {
        // 1 SBS: variables (x, y, z) on the simplex, final smoothing weights
        let p = TaskGlobalProblem::new(vec![1.0, 0.0, 1.0], vec![0.2, -0.1, 0.3], vec![5.0, 1.0, 8.0], 10.0, 1.0);
        let cfg = GlobalConfig::default();
        let out = p.solve(&cfg);
        let f = |x: f64, y: f64| {
            let z = 1.0 - x - y;
            let mut s = out.state.clone();
            s.v = vec![x, y, z];
            s.m = p.t_max - dot(&p.delay, &s.v);
            p.smoothed_objective(&s).unwrap_or(f64::INFINITY)
        };
        let n = 1000;
        let mut best = f64::INFINITY;
        for a in 1..n {
            for b in 1..(n - a) {
                best = best.min(f(a as f64 / n as f64, b as f64 / n as f64));
            }
        }
        let got = p.smoothed_objective(&out.state).unwrap();
        assert!(got <= best + 1e-3, "{got} vs grid {best}");
    }

    #[test]
    fn smoothing_drives_variables_to_targets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 2);
            let out = p.solve(&GlobalConfig::default());
            let dist = |v: &[f64]| {
                v.iter()
                    .zip(&p.local)
                    .map(|(&x, &l)| (x - l).abs().min(x).min(1.0 - x))
                    .fold(0.0, f64::max)
            };
            let first = dist(&out.rounds[0].v);
            let last = dist(&out.rounds.last().unwrap().v);
            assert!(last <= first + 1e-9, "{first} -> {last}");
        }
    }
}
