//! Line-searched Newton ascent with curvature repair.
//!
//! The Hessian is symmetrized and its eigenvalues clipped below a small
//! negative ceiling, so the search direction is always an ascent
//! direction even far from the optimum. Coordinates registered in
//! `boundary_watch` are allowed to run off to minus infinity; the
//! optimizer reports boundary convergence instead of failing when the
//! remaining coordinates have settled.

use super::objective::Objective;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Eigenvalue ceiling used when repairing the Hessian: anything above
/// this (including positive curvature) is replaced by it.
const EIG_CEILING: f64 = -1e-8;

/// Armijo slope fraction for the backtracking line search.
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct BoundaryWatch {
    pub index: usize,
    /// Boundary convergence is considered once the coordinate falls
    /// below this value.
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonSettings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub max_halvings: usize,
    /// Coefficient magnitude treated as evidence of separation or a
    /// degenerate design rather than a real optimum.
    pub coef_limit: f64,
    pub boundary_watch: Vec<BoundaryWatch>,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            max_iter: 200,
            grad_tol: 1e-8,
            max_halvings: 50,
            coef_limit: 1e3,
            boundary_watch: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub theta: DVector<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Watched coordinates that finished below their thresholds.
    pub at_boundary: Vec<usize>,
}

/// Inverse of the repaired negative Hessian: symmetrize, equilibrate by
/// the diagonal, clip each eigenvalue to at most [`EIG_CEILING`],
/// negate, invert, undo the equilibration. The result is positive
/// definite by construction. The diagonal scaling keeps the
/// eigendecomposition accurate when columns live on wildly different
/// scales, as with a covariate next to its square.
pub(crate) fn clipped_neg_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    let p = h.nrows();
    let sym = 0.5 * (h + h.transpose());
    let scale: Vec<f64> = (0..p)
        .map(|j| 1.0 / sym[(j, j)].abs().sqrt().max(1e-8))
        .collect();
    let scaled = DMatrix::from_fn(p, p, |i, j| sym[(i, j)] * scale[i] * scale[j]);
    let eig = scaled.symmetric_eigen();
    let mut inv = DMatrix::zeros(p, p);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let clipped = lambda.min(EIG_CEILING);
        let v = eig.eigenvectors.column(i);
        inv += (v * v.transpose()) * (-1.0 / clipped);
    }
    DMatrix::from_fn(p, p, |i, j| inv[(i, j)] * scale[i] * scale[j])
}

pub fn maximize(
    obj: &dyn Objective,
    start: &DVector<f64>,
    settings: &NewtonSettings,
) -> Result<NewtonOutcome> {
    let dim = obj.dim();
    let names = obj.param_names();
    let watched = |j: usize| settings.boundary_watch.iter().any(|w| w.index == j);
    let boundary_hits = |theta: &DVector<f64>| -> Vec<usize> {
        settings
            .boundary_watch
            .iter()
            .filter(|w| theta[w.index] < w.threshold)
            .map(|w| w.index)
            .collect()
    };

    let mut theta = start.clone();
    let mut ll = obj.loglik(&theta)?;
    if !ll.is_finite() {
        return Err(Error::BadStart);
    }

    let mut grad_norm = f64::INFINITY;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut stalls = 0u32;
    for iter in 1..=settings.max_iter {
        let g = obj.grad(&theta)?;
        for j in 0..dim {
            if !watched(j) && theta[j].abs() > settings.coef_limit {
                return Err(Error::Separation {
                    column: names[j].clone(),
                    limit: settings.coef_limit,
                });
            }
        }
        grad_norm = g.amax();

        let interior_done = (0..dim)
            .filter(|&j| !watched(j))
            .all(|j| g[j].abs() < settings.grad_tol);
        let watch_done = settings.boundary_watch.iter().all(|w| {
            g[w.index].abs() < settings.grad_tol
                || (theta[w.index] < w.threshold && g[w.index] < settings.grad_tol)
        });
        // Once steps improve the objective by less than its own
        // rounding floor, a gradient a few orders above the tolerance
        // is the best the arithmetic can deliver. Two consecutive
        // stalls guard against a single unlucky rounding.
        if iter > 1 && ll - prev_ll <= 1e-11 * (1.0 + ll.abs()) && grad_norm < 1e-4 {
            stalls += 1;
        } else {
            stalls = 0;
        }
        if (interior_done && watch_done) || stalls >= 2 {
            return Ok(NewtonOutcome {
                at_boundary: boundary_hits(&theta),
                theta,
                loglik: ll,
                iterations: iter,
                grad_norm,
            });
        }
        prev_ll = ll;

        let h = obj.hessian(&theta)?;
        let mut direction = clipped_neg_inverse(&h) * &g;
        // Half the slope along the Newton direction is the gain a full
        // step can still deliver. Once that gain drops below the
        // objective's rounding floor the fit is done in every scale,
        // so take the step and stop; a raw-gradient tolerance alone is
        // unreachable when columns differ by orders of magnitude.
        let finishing = 0.5 * direction.dot(&g) <= 1e-12 * (1.0 + ll.abs());
        if direction.dot(&g) <= 0.0 {
            direction = g.clone();
        }
        let cap = 20.0 * (1.0 + theta.amax());
        let widest = direction.amax();
        if widest > cap {
            direction *= cap / widest;
        }

        let slope = direction.dot(&g);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let candidate = &theta + step * &direction;
            if let Ok(ll_new) = obj.loglik(&candidate) {
                if ll_new.is_finite() && ll_new >= ll + ARMIJO * step * slope {
                    theta = candidate;
                    ll = ll_new;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if finishing {
            let grad_norm = obj.grad(&theta)?.amax();
            return Ok(NewtonOutcome {
                at_boundary: boundary_hits(&theta),
                theta,
                loglik: ll,
                iterations: iter,
                grad_norm,
            });
        }
        if !accepted {
            if grad_norm < 1e-4 {
                return Ok(NewtonOutcome {
                    at_boundary: boundary_hits(&theta),
                    theta,
                    loglik: ll,
                    iterations: iter,
                    grad_norm,
                });
            }
            return Err(Error::LineSearchFailed);
        }
    }

    Err(Error::NoConvergence {
        max_iter: settings.max_iter,
        grad_norm,
    })
}
