//! Damped Newton minimizer shared by the logistic fits and the nonlinear
//! doubly robust risk. Falls back to steepest descent when the Hessian
//! direction fails to descend.

use crate::numkit::{spd_cholesky, Matrix, Vector};

pub(crate) struct NewtonOutcome {
    pub beta: Vector,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 30;

fn backtrack(
    beta: &Vector,
    value: f64,
    dir: &Vector,
    f: &mut impl FnMut(&Vector) -> f64,
) -> Option<(Vector, f64)> {
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let cand = beta + dir * t;
        let fc = f(&cand);
        if fc.is_finite() && fc < value {
            return Some((cand, fc));
        }
        t *= 0.5;
    }
    None
}

/// Minimize a twice-differentiable objective, stopping when the gradient
/// ∞-norm drops to `tol`. The returned iterate is the best one seen even when
/// the iteration budget runs out.
pub(crate) fn minimize_damped_newton(
    beta0: Vector,
    mut value: impl FnMut(&Vector) -> f64,
    mut gradient: impl FnMut(&Vector) -> Vector,
    mut hessian: impl FnMut(&Vector) -> Matrix,
    tol: f64,
    max_iter: usize,
) -> NewtonOutcome {
    let mut beta = beta0;
    let mut fval = value(&beta);
    let mut grad = gradient(&beta);
    let mut grad_norm = grad.amax();
    let mut best = (beta.clone(), fval, grad_norm);
    let mut iterations = 0;

    while grad_norm > tol && iterations < max_iter {
        iterations += 1;
        let newton_dir = spd_cholesky(&hessian(&beta)).ok().map(|chol| -chol.solve(&grad));
        let descent_dir = match newton_dir {
            Some(dir) if dir.dot(&grad) < 0.0 => dir,
            _ => -&grad,
        };
        let step = match backtrack(&beta, fval, &descent_dir, &mut value) {
            Some(hit) => Some(hit),
            // Newton direction stalled: retry along the raw gradient.
            None if descent_dir != -&grad => backtrack(&beta, fval, &(-&grad), &mut value),
            None => None,
        };
        match step {
            Some((next, fnext)) => {
                beta = next;
                fval = fnext;
            }
            None => break, // no descent possible at floating-point resolution
        }
        grad = gradient(&beta);
        grad_norm = grad.amax();
        if fval < best.1 {
            best = (beta.clone(), fval, grad_norm);
        }
    }

    let converged = grad_norm <= tol;
    if converged || fval <= best.1 {
        NewtonOutcome {
            beta,
            grad_norm,
            iterations,
            converged,
        }
    } else {
        NewtonOutcome {
            beta: best.0,
            grad_norm: best.2,
            iterations,
            converged: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges_in_one_newton_step() {
        // f(b) = (b0-1)^2 + 2 (b1+3)^2
        let out = minimize_damped_newton(
            Vector::zeros(2),
            |b| (b[0] - 1.0).powi(2) + 2.0 * (b[1] + 3.0).powi(2),
            |b| Vector::from_vec(vec![2.0 * (b[0] - 1.0), 4.0 * (b[1] + 3.0)]),
            |_| Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]),
            1e-10,
            50,
        );
        assert!(out.converged);
        assert!((out.beta[0] - 1.0).abs() < 1e-10);
        assert!((out.beta[1] + 3.0).abs() < 1e-10);
    }

    #[test]
    fn indefinite_hessian_falls_back_to_gradient() {
        // f(b) = b^4 has zero Hessian at 0 from the wrong side when seeded at 2.
        let out = minimize_damped_newton(
            Vector::from_vec(vec![2.0]),
            |b| b[0].powi(4),
            |b| Vector::from_vec(vec![4.0 * b[0].powi(3)]),
            |_| Matrix::from_row_slice(1, 1, &[-1.0]),
            1e-6,
            500,
        );
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert!(out.beta[0].abs() < 0.1);
    }
}
