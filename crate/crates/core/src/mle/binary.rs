//! Probit and logit maximum likelihood.

use nalgebra::{DMatrix, DVector};

use super::newton::{clipped_neg_inverse, maximize, NewtonSettings};
use super::objective::Objective;
use super::result::FitResult;
use super::sandwich::sandwich_vcov;
use crate::data::DesignMatrix;
use crate::dist::normal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryLink {
    Probit,
    Logit,
}

impl BinaryLink {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLink::Probit => "probit",
            BinaryLink::Logit => "logit",
        }
    }

    /// Response probability at linear predictor `eta`.
    pub fn prob(self, eta: f64) -> f64 {
        match self {
            BinaryLink::Probit => normal::cdf(eta),
            BinaryLink::Logit => normal::logistic(eta),
        }
    }
}

/// Score of the log-likelihood with respect to the linear predictor.
///
/// For the probit this is the generalized residual: the conditional
/// mean of the latent error given the observed indicator, the quantity
/// carried into second stages as a control function.
pub fn link_score(link: BinaryLink, eta: f64, y: u8) -> f64 {
    match link {
        BinaryLink::Probit => {
            if y == 1 {
                normal::inverse_mills(eta)
            } else {
                -normal::inverse_mills(-eta)
            }
        }
        BinaryLink::Logit => y as f64 - normal::logistic(eta),
    }
}

/// Derivative of [`link_score`] in `eta`; always negative, so the
/// log-likelihood is globally concave.
fn link_curvature(link: BinaryLink, eta: f64, y: u8) -> f64 {
    match link {
        BinaryLink::Probit => {
            if y == 1 {
                let m = normal::inverse_mills(eta);
                -m * (eta + m)
            } else {
                let m = normal::inverse_mills(-eta);
                m * (eta - m)
            }
        }
        BinaryLink::Logit => {
            let p = normal::logistic(eta);
            -p * (1.0 - p)
        }
    }
}

pub struct BinaryObjective<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [u8],
    link: BinaryLink,
    names: Vec<String>,
}

impl<'a> BinaryObjective<'a> {
    pub fn new(design: &'a DesignMatrix, y: &'a [u8], link: BinaryLink) -> Result<Self> {
        if y.len() != design.n_rows() {
            return Err(Error::Config(format!(
                "{} outcomes for {} design rows",
                y.len(),
                design.n_rows()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!(
                "binary outcome takes values 0 or 1, got {bad}"
            )));
        }
        Ok(BinaryObjective {
            x: &design.x,
            y,
            link,
            names: design.names.clone(),
        })
    }

    fn eta(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.x * theta
    }
}

impl Objective for BinaryObjective<'_> {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        let eta = self.eta(theta);
        let mut ll = 0.0;
        for (i, &y) in self.y.iter().enumerate() {
            ll += match self.link {
                BinaryLink::Probit => {
                    if y == 1 {
                        normal::log_cdf(eta[i])
                    } else {
                        normal::log_cdf(-eta[i])
                    }
                }
                BinaryLink::Logit => y as f64 * eta[i] - normal::softplus(eta[i]),
            };
        }
        Ok(ll)
    }

    fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let eta = self.eta(theta);
        let mut g = DVector::zeros(self.dim());
        for (i, &y) in self.y.iter().enumerate() {
            let s = link_score(self.link, eta[i], y);
            for j in 0..self.dim() {
                g[j] += s * self.x[(i, j)];
            }
        }
        Ok(g)
    }

    fn obs_scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let eta = self.eta(theta);
        let mut s = DMatrix::zeros(self.n_obs(), self.dim());
        for (i, &y) in self.y.iter().enumerate() {
            let f = link_score(self.link, eta[i], y);
            for j in 0..self.dim() {
                s[(i, j)] = f * self.x[(i, j)];
            }
        }
        Ok(s)
    }

    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let eta = self.eta(theta);
        let p = self.dim();
        let mut h = DMatrix::zeros(p, p);
        for (i, &y) in self.y.iter().enumerate() {
            let w = link_curvature(self.link, eta[i], y);
            for a in 0..p {
                let xa = self.x[(i, a)];
                if xa == 0.0 {
                    continue;
                }
                for b in a..p {
                    h[(a, b)] += w * xa * self.x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        Ok(h)
    }
}

/// Fit a binary-response model with person-cluster robust standard errors.
pub fn fit_binary(
    design: &DesignMatrix,
    y: &[u8],
    link: BinaryLink,
    cluster: &[u64],
) -> Result<FitResult> {
    if cluster.len() != design.n_rows() {
        return Err(Error::Config(format!(
            "{} cluster ids for {} design rows",
            cluster.len(),
            design.n_rows()
        )));
    }
    let obj = BinaryObjective::new(design, y, link)?;
    let start = DVector::zeros(obj.dim());
    let settings = NewtonSettings::default();
    let out = maximize(&obj, &start, &settings)?;

    // Perfect classification leaves the total log-likelihood at zero to
    // machine precision while the gradient flattens out exponentially,
    // so the coefficient-magnitude guard inside the optimizer never
    // trips. Blame the column doing the most discriminating.
    if out.loglik > -1e-6 {
        let culprit = (0..design.n_cols())
            .max_by(|&a, &b| {
                let spread = |j: usize| {
                    let col = design.x.column(j);
                    let mean = col.sum() / col.len() as f64;
                    out.theta[j].abs() * col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt()
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap_or(0);
        return Err(Error::Separation {
            column: design.names[culprit].clone(),
            limit: settings.coef_limit,
        });
    }

    let h = obj.hessian(&out.theta)?;
    let bread = clipped_neg_inverse(&h);
    let scores = obj.obs_scores(&out.theta)?;
    let (vcov, n_clusters) = sandwich_vcov(&bread, &scores, cluster);

    let mut warnings = Vec::new();
    if obj.dim() > n_clusters {
        warnings.push(format!(
            "{} parameters with only {n_clusters} clusters; clustered standard errors may be unreliable",
            obj.dim()
        ));
    }

    Ok(FitResult {
        model: link.as_str().to_string(),
        names: design.names.clone(),
        n_design: design.n_cols(),
        theta: out.theta,
        loglik: out.loglik,
        vcov,
        vcov_naive: bread,
        n_obs: y.len(),
        n_clusters,
        boundary: vec![],
        iterations: out.iterations,
        warnings,
    })
}
