//! Fitted-model container shared by every estimator in the crate.

use nalgebra::{DMatrix, DVector};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Estimator label, e.g. `probit` or `nb2`.
    pub model: String,
    pub names: Vec<String>,
    pub theta: DVector<f64>,
    pub loglik: f64,
    /// Cluster-robust covariance.
    pub vcov: DMatrix<f64>,
    /// Inverse negative Hessian, kept for diagnostics.
    pub vcov_naive: DMatrix<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Leading parameters that are design-matrix coefficients; anything
    /// after them (dispersion, inflation) is auxiliary.
    pub n_design: usize,
    /// Parameter indices that converged to the edge of the parameter
    /// space; their standard errors are not meaningful.
    pub boundary: Vec<usize>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coef(&self, name: &str) -> Result<f64> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        Ok(self.theta[i])
    }

    pub fn se(&self, i: usize) -> f64 {
        if self.boundary.contains(&i) {
            f64::NAN
        } else {
            self.vcov[(i, i)].max(0.0).sqrt()
        }
    }

    pub fn z(&self, i: usize) -> f64 {
        self.theta[i] / self.se(i)
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary.contains(&i)
    }
}

impl fmt::Display for FitResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_width = self
            .names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(0)
            .max("parameter".len());
        writeln!(
            f,
            "{} fit: {} obs, {} clusters, loglik {:.4}, {} iterations",
            self.model, self.n_obs, self.n_clusters, self.loglik, self.iterations
        )?;
        writeln!(
            f,
            "{:<name_width$}  {:>12}  {:>12}  {:>8}",
            "parameter", "estimate", "std err", "z"
        )?;
        for i in 0..self.names.len() {
            if self.is_boundary(i) {
                writeln!(
                    f,
                    "{:<name_width$}  {:>12.6}  {:>12}  {:>8}",
                    self.names[i], self.theta[i], "(boundary)", ""
                )?;
            } else {
                writeln!(
                    f,
                    "{:<name_width$}  {:>12.6}  {:>12.6}  {:>8.3}",
                    self.names[i],
                    self.theta[i],
                    self.se(i),
                    self.z(i)
                )?;
            }
        }
        for w in &self.warnings {
            writeln!(f, "note: {w}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> FitResult {
        FitResult {
            model: "probit".into(),
            names: vec!["intercept".into(), "age".into()],
            theta: DVector::from_vec(vec![-0.25, 0.0125]),
            loglik: -41.5,
            vcov: DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.000025]),
            vcov_naive: DMatrix::identity(2, 2),
            n_obs: 100,
            n_clusters: 25,
            n_design: 2,
            boundary: vec![],
            iterations: 5,
            warnings: vec![],
        }
    }

    #[test]
    fn coefficient_lookup_and_z() {
        let r = toy();
        assert_eq!(r.coef("age").unwrap(), 0.0125);
        assert!((r.se(1) - 0.005).abs() < 1e-15);
        assert!((r.z(1) - 2.5).abs() < 1e-12);
        assert!(r.coef("income").is_err());
    }

    #[test]
    fn boundary_parameters_render_without_standard_errors() {
        let mut r = toy();
        r.boundary = vec![1];
        assert!(r.se(1).is_nan());
        let text = format!("{r}");
        assert!(text.contains("(boundary)"));
    }
}
