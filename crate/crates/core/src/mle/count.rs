//! Count-model maximum likelihood with a warm-start ladder.
//!
//! Every family starts from the Poisson solution to its own design,
//! with `ln alpha` starting at zero and the inflation intercept at the
//! logit of the excess-zero share. Dispersion is estimated as `ln
//! alpha` and inflation on the logit scale, so the parameter space is
//! unconstrained and the
//! likelihood boundary `alpha -> 0` (or inflation probability `-> 0`)
//! shows up as a coordinate running to minus infinity. Such fits are
//! reported at the nested model's solution with the divergent
//! coordinate pinned at [`BOUNDARY_SENTINEL`], which keeps likelihood
//! ratios against the nested model non-negative by construction.

use nalgebra::{DMatrix, DVector};

use super::newton::{clipped_neg_inverse, maximize, BoundaryWatch, NewtonOutcome, NewtonSettings};
use super::objective::Objective;
use super::result::FitResult;
use super::sandwich::sandwich_vcov;
use crate::data::DesignMatrix;
use crate::dist::count::nb2_log_zero;
use crate::dist::{CountFamily, FamilyKind};
use crate::error::{Error, Result};

/// Reported value for dispersion or inflation coordinates that diverge
/// to minus infinity; `exp(-30)` is below 1e-13, numerically
/// indistinguishable from the limit for these likelihoods.
pub const BOUNDARY_SENTINEL: f64 = -30.0;

/// Watch threshold for `ln alpha`.
const DISPERSION_FLOOR: f64 = -12.0;

/// Watch threshold for the inflation intercept.
const INFLATION_FLOOR: f64 = -15.0;

pub struct CountObjective<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [u64],
    family: FamilyKind,
    z_infl: Option<&'a DMatrix<f64>>,
    names: Vec<String>,
}

impl<'a> CountObjective<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        y: &'a [u64],
        family: FamilyKind,
        inflation: Option<&'a DesignMatrix>,
    ) -> Result<Self> {
        if y.len() != design.n_rows() {
            return Err(Error::Config(format!(
                "{} outcomes for {} design rows",
                y.len(),
                design.n_rows()
            )));
        }
        if family.has_inflation() != inflation.is_some() {
            return Err(Error::Config(format!(
                "family {family} {} an inflation design",
                if family.has_inflation() { "requires" } else { "does not take" }
            )));
        }
        if let Some(z) = inflation {
            if z.n_rows() != design.n_rows() {
                return Err(Error::Config(format!(
                    "inflation design has {} rows, count design {}",
                    z.n_rows(),
                    design.n_rows()
                )));
            }
        }
        if family == FamilyKind::Ztnb {
            if let Some(i) = y.iter().position(|&v| v == 0) {
                return Err(Error::BadValue {
                    row: i,
                    column: "outcome".into(),
                    reason: "zero count in a zero-truncated model".into(),
                });
            }
        }
        let mut names = design.names.clone();
        if family.has_dispersion() {
            names.push("ln_alpha".into());
        }
        if let Some(z) = inflation {
            names.extend(z.names.iter().map(|n| format!("inflate_{n}")));
        }
        Ok(CountObjective {
            x: &design.x,
            y,
            family,
            z_infl: inflation.map(|z| &z.x),
            names,
        })
    }

    fn p_design(&self) -> usize {
        self.x.ncols()
    }

    /// Index of `ln alpha` in the parameter vector.
    pub fn dispersion_index(&self) -> Option<usize> {
        self.family.has_dispersion().then(|| self.p_design())
    }

    /// Index of the first inflation parameter.
    pub fn inflation_start(&self) -> Option<usize> {
        self.z_infl.map(|_| self.p_design() + 1)
    }

    fn row_family(&self, theta: &DVector<f64>, i: usize) -> CountFamily {
        let mut eta = 0.0;
        for j in 0..self.p_design() {
            eta += self.x[(i, j)] * theta[j];
        }
        let lambda = eta.exp();
        match self.family {
            FamilyKind::Poisson => CountFamily::Poisson { lambda },
            FamilyKind::Nb2 => CountFamily::Nb2 {
                lambda,
                alpha: theta[self.p_design()].exp(),
            },
            FamilyKind::Ztnb => CountFamily::Ztnb {
                lambda,
                alpha: theta[self.p_design()].exp(),
            },
            FamilyKind::Zinb => {
                let z = self.z_infl.expect("validated in new");
                let start = self.p_design() + 1;
                let mut zeta = 0.0;
                for j in 0..z.ncols() {
                    zeta += z[(i, j)] * theta[start + j];
                }
                CountFamily::Zinb {
                    lambda,
                    alpha: theta[self.p_design()].exp(),
                    p_extra: crate::dist::normal::logistic(zeta),
                }
            }
        }
    }
}

impl Objective for CountObjective<'_> {
    fn dim(&self) -> usize {
        self.p_design()
            + usize::from(self.family.has_dispersion())
            + self.z_infl.map_or(0, |z| z.ncols())
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        let mut ll = 0.0;
        for (i, &y) in self.y.iter().enumerate() {
            ll += self.row_family(theta, i).logpmf(y)?;
        }
        Ok(ll)
    }

    fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.dim());
        for (i, &y) in self.y.iter().enumerate() {
            let gi = self.row_family(theta, i).grad_logpmf(y)?;
            for j in 0..self.p_design() {
                g[j] += gi.d_log_mean * self.x[(i, j)];
            }
            if let Some(k) = self.dispersion_index() {
                g[k] += gi.d_log_disp.unwrap_or(0.0);
            }
            if let (Some(start), Some(z)) = (self.inflation_start(), self.z_infl) {
                let s = gi.d_logit_extra.unwrap_or(0.0);
                for j in 0..z.ncols() {
                    g[start + j] += s * z[(i, j)];
                }
            }
        }
        Ok(g)
    }

    fn obs_scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut s = DMatrix::zeros(self.n_obs(), self.dim());
        for (i, &y) in self.y.iter().enumerate() {
            let gi = self.row_family(theta, i).grad_logpmf(y)?;
            for j in 0..self.p_design() {
                s[(i, j)] = gi.d_log_mean * self.x[(i, j)];
            }
            if let Some(k) = self.dispersion_index() {
                s[(i, k)] = gi.d_log_disp.unwrap_or(0.0);
            }
            if let (Some(start), Some(z)) = (self.inflation_start(), self.z_infl) {
                let f = gi.d_logit_extra.unwrap_or(0.0);
                for j in 0..z.ncols() {
                    s[(i, start + j)] = f * z[(i, j)];
                }
            }
        }
        Ok(s)
    }
}

/// Fit a count model with person-cluster robust standard errors.
///
/// `inflation` must be given exactly for the zero-inflated family; its
/// first column is expected to be the intercept for boundary watching.
pub fn fit_count(
    design: &DesignMatrix,
    y: &[u64],
    family: FamilyKind,
    inflation: Option<&DesignMatrix>,
    cluster: &[u64],
) -> Result<FitResult> {
    if cluster.len() != design.n_rows() {
        return Err(Error::Config(format!(
            "{} cluster ids for {} design rows",
            cluster.len(),
            design.n_rows()
        )));
    }
    if family.has_inflation() != inflation.is_some() {
        return Err(Error::Config(format!(
            "family {family} {} an inflation design",
            if family.has_inflation() { "requires" } else { "does not take" }
        )));
    }
    let p = design.n_cols();

    // Stage one: Poisson coefficients as the universal warm start.
    let pois_obj = CountObjective::new(design, y, FamilyKind::Poisson, None)?;
    let pois = maximize(&pois_obj, &DVector::zeros(p), &NewtonSettings::default())?;
    let disp_settings = NewtonSettings {
        boundary_watch: vec![BoundaryWatch {
            index: p,
            threshold: DISPERSION_FLOOR,
        }],
        ..NewtonSettings::default()
    };

    match family {
        FamilyKind::Poisson => finalize("poisson", &pois_obj, pois, cluster, design, vec![]),
        FamilyKind::Nb2 => nb2_or_nested("nb2", design, y, cluster, &pois_obj, pois),
        FamilyKind::Zinb => {
            let z = inflation.ok_or_else(|| {
                Error::Config("zero-inflated family requires an inflation design".into())
            })?;
            let zinb_obj = CountObjective::new(design, y, FamilyKind::Zinb, Some(z))?;
            let q = z.n_cols();
            let mut zstart = DVector::zeros(p + 1 + q);
            zstart.rows_mut(0, p).copy_from(&pois.theta);
            if let Ok(zi) = z.column_index("intercept") {
                let zero_share =
                    y.iter().filter(|&&v| v == 0).count() as f64 / y.len() as f64;
                let alpha0 = zstart[p].exp();
                let nb_zero_share = (0..y.len())
                    .map(|i| {
                        let mut eta = 0.0;
                        for j in 0..p {
                            eta += design.x[(i, j)] * zstart[j];
                        }
                        nb2_log_zero(eta.exp(), alpha0).exp()
                    })
                    .sum::<f64>()
                    / y.len() as f64;
                let gap = (zero_share - nb_zero_share).clamp(0.01, 0.99);
                zstart[p + 1 + zi] = (gap / (1.0 - gap)).ln();
            }
            let mut settings = disp_settings;
            if q == 1 {
                settings.boundary_watch.push(BoundaryWatch {
                    index: p + 1,
                    threshold: INFLATION_FLOOR,
                });
            }
            let out = maximize(&zinb_obj, &zstart, &settings)?;
            if q == 1 && out.at_boundary.contains(&(p + 1)) {
                // No extra zeros: report the nested plain-NB2 solution.
                let mut fit = nb2_or_nested("zinb", design, y, cluster, &pois_obj, pois)?;
                let mut bounds: Vec<usize> = fit.boundary.clone();
                bounds.push(p + 1);
                fit = embed_boundary(fit, p + 1 + q, &bounds, &zinb_obj.param_names());
                fit.iterations += out.iterations;
                return Ok(fit);
            }
            if out.at_boundary.contains(&p) {
                return at_sentinel("zinb", &zinb_obj, out, cluster, design, vec![p]);
            }
            finalize("zinb", &zinb_obj, out, cluster, design, vec![])
        }
        FamilyKind::Ztnb => {
            let zt_obj = CountObjective::new(design, y, FamilyKind::Ztnb, None)?;
            let mut start = DVector::zeros(p + 1);
            start.rows_mut(0, p).copy_from(&pois.theta);
            let out = maximize(&zt_obj, &start, &disp_settings)?;
            if out.at_boundary.contains(&p) {
                return at_sentinel("ztnb", &zt_obj, out, cluster, design, vec![p]);
            }
            finalize("ztnb", &zt_obj, out, cluster, design, vec![])
        }
    }
}

/// Fit the dispersion model; if `ln alpha` runs to the boundary the data
/// are equidispersed and the profile optimum is the Poisson solution,
/// which is reported exactly so that the likelihood ratio against the
/// plain Poisson fit is zero, not a tiny negative.
fn nb2_or_nested(
    model: &str,
    design: &DesignMatrix,
    y: &[u64],
    cluster: &[u64],
    pois_obj: &CountObjective,
    pois: NewtonOutcome,
) -> Result<FitResult> {
    let p = design.n_cols();
    let nb2_obj = CountObjective::new(design, y, FamilyKind::Nb2, None)?;
    let mut start = DVector::zeros(p + 1);
    start.rows_mut(0, p).copy_from(&pois.theta);
    let settings = NewtonSettings {
        boundary_watch: vec![BoundaryWatch {
            index: p,
            threshold: DISPERSION_FLOOR,
        }],
        ..NewtonSettings::default()
    };
    let nb2 = maximize(&nb2_obj, &start, &settings)?;
    if nb2.at_boundary.contains(&p) {
        let mut fit = finalize(model, pois_obj, pois, cluster, design, vec![])?;
        fit = embed_boundary(fit, p + 1, &[p], &nb2_obj.param_names());
        fit.iterations += nb2.iterations;
        return Ok(fit);
    }
    finalize(model, &nb2_obj, nb2, cluster, design, vec![])
}

/// Compute covariances and package a converged interior fit.
fn finalize(
    model: &str,
    obj: &CountObjective,
    out: NewtonOutcome,
    cluster: &[u64],
    design: &DesignMatrix,
    boundary: Vec<usize>,
) -> Result<FitResult> {
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
        model: model.to_string(),
        names: obj.param_names(),
        n_design: design.n_cols(),
        theta: out.theta,
        loglik: out.loglik,
        vcov,
        vcov_naive: bread,
        n_obs: obj.n_obs(),
        n_clusters,
        boundary,
        iterations: out.iterations,
        warnings,
    })
}

/// Re-express a nested fit in a wider parameter vector, pinning the
/// coordinates in `boundary` at the sentinel with zeroed covariance.
/// Interior coordinates of the source map onto the interior
/// coordinates of the target in order.
fn embed_boundary(
    fit: FitResult,
    dim: usize,
    boundary: &[usize],
    names: &[String],
) -> FitResult {
    let src: Vec<usize> = (0..fit.theta.len())
        .filter(|i| !fit.boundary.contains(i))
        .collect();
    let dst: Vec<usize> = (0..dim).filter(|i| !boundary.contains(i)).collect();
    assert_eq!(src.len(), dst.len(), "interior dimensions must agree");

    let mut theta = DVector::from_element(dim, BOUNDARY_SENTINEL);
    let mut vcov = DMatrix::zeros(dim, dim);
    let mut vcov_naive = DMatrix::zeros(dim, dim);
    for (&sa, &da) in src.iter().zip(&dst) {
        theta[da] = fit.theta[sa];
        for (&sb, &db) in src.iter().zip(&dst) {
            vcov[(da, db)] = fit.vcov[(sa, sb)];
            vcov_naive[(da, db)] = fit.vcov_naive[(sa, sb)];
        }
    }
    FitResult {
        names: names.to_vec(),
        theta,
        vcov,
        vcov_naive,
        boundary: boundary.to_vec(),
        ..fit
    }
}

/// Package a fit whose dispersion ran to the boundary but which has no
/// nested closed form to fall back on: pin the divergent coordinate at
/// the sentinel and evaluate everything else there.
fn at_sentinel(
    model: &str,
    obj: &CountObjective,
    mut out: NewtonOutcome,
    cluster: &[u64],
    design: &DesignMatrix,
    boundary: Vec<usize>,
) -> Result<FitResult> {
    for &b in &boundary {
        out.theta[b] = BOUNDARY_SENTINEL;
    }
    out.loglik = obj.loglik(&out.theta)?;
    let mut fit = finalize(model, obj, out, cluster, design, boundary.clone())?;
    for &b in &boundary {
        for j in 0..fit.theta.len() {
            fit.vcov[(b, j)] = 0.0;
            fit.vcov[(j, b)] = 0.0;
            fit.vcov_naive[(b, j)] = 0.0;
            fit.vcov_naive[(j, b)] = 0.0;
        }
    }
    Ok(fit)
}
