//! Matrix-free conjugate gradient.

use crate::num::{dot, norm2, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum CgOutcome<T> {
    Converged { x: Vec<T>, iterations: usize },
    /// A search direction with `pᵀAp ≤ 0` was met.
    NotPositiveDefinite,
    /// Iteration cap reached; the last iterate is returned.
    MaxIterations { x: Vec<T>, residual: T },
}

/// Solves `A x = b` for symmetric `A` given as `apply(v, out)`.
///
/// Stops when `‖r‖ ≤ rel_tol·‖b‖`.
pub fn conjugate_gradient<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    b: &[T],
    rel_tol: T,
    max_iter: usize,
) -> CgOutcome<T> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    let bn = norm2(b);
    if bn == T::zero() {
        return CgOutcome::Converged { x, iterations: 0 };
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![T::zero(); n];
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return CgOutcome::NotPositiveDefinite;
        }
        let a = rr / pap;
        for i in 0..n {
            x[i] = x[i] + a * p[i];
            r[i] = r[i] - a * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= rel_tol * bn {
            return CgOutcome::Converged { x, iterations: it + 1 };
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    CgOutcome::MaxIterations { x, residual: rr.sqrt() / bn }
}
