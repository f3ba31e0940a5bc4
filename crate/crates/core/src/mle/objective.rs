//! Log-likelihood objective interface for the Newton maximizer.

use crate::error::Result;
use nalgebra::{DMatrix, DVector};

/// A smooth log-likelihood with analytic first derivatives.
///
/// The Hessian defaults to a central finite difference of the analytic
/// gradient, which keeps second derivatives consistent with the scores
/// without hand-deriving them for every family.
pub trait Objective {
    fn dim(&self) -> usize;

    fn n_obs(&self) -> usize;

    fn param_names(&self) -> Vec<String>;

    fn loglik(&self, theta: &DVector<f64>) -> Result<f64>;

    fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Per-observation score rows, `n_obs` by `dim`. Column sums equal
    /// the gradient; the rows feed the clustered covariance.
    fn obs_scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.dim();
        let mut h = DMatrix::zeros(p, p);
        let mut point = theta.clone();
        for j in 0..p {
            let step = 1e-5 * (1.0 + theta[j].abs());
            point[j] = theta[j] + step;
            let up = self.grad(&point)?;
            point[j] = theta[j] - step;
            let down = self.grad(&point)?;
            point[j] = theta[j];
            let col = (up - down) / (2.0 * step);
            h.set_column(j, &col);
        }
        Ok(0.5 * (&h + h.transpose()))
    }
}

/// Largest relative disagreement between the analytic gradient and a
/// central finite difference of the log-likelihood at `theta`.
///
/// Diagnostic used by tests; anything above roughly `1e-6` on a
/// well-scaled problem points at a wrong score.
pub fn check_gradient(obj: &dyn Objective, theta: &DVector<f64>) -> Result<f64> {
    let analytic = obj.grad(theta)?;
    let mut worst: f64 = 0.0;
    let mut point = theta.clone();
    for j in 0..obj.dim() {
        let step = 1e-6 * (1.0 + theta[j].abs());
        point[j] = theta[j] + step;
        let up = obj.loglik(&point)?;
        point[j] = theta[j] - step;
        let down = obj.loglik(&point)?;
        point[j] = theta[j];
        let fd = (up - down) / (2.0 * step);
        let scale = analytic[j].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[j] - fd).abs() / scale);
    }
    Ok(worst)
}
