//! Post-estimation statistics: incidence-rate ratios, probit average
//! marginal effects, Wald joint tests, the boundary likelihood-ratio
//! test for overdispersion, and a time-stability interaction check.
//!
//! Significance is flagged at the two-sided 5% level (|z| >= 1.96).
//! Callers wanting a different threshold can recompute from the stored
//! z values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::data::{build_design, covariate_terms, DesignMatrix, Frame, PanelDataset, Term};
use crate::dist::{normal, FamilyKind};
use crate::error::{Error, Result};
use crate::mle::{fit_count, FitResult};

/// Two-sided 5% critical value on the z scale.
pub const Z_CRIT: f64 = 1.96;

/// Upper tail probability of the chi-square distribution.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(dof / 2.0, x / 2.0)
    }
}

/// Exponentiated coefficient together with its significance reading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrrEntry {
    pub name: String,
    pub irr: f64,
    pub z: f64,
    pub significant: bool,
}

/// Average marginal effect of one design variable on an event
/// probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmeEntry {
    pub name: String,
    pub ame: f64,
    /// Carried over from the coefficient scale.
    pub z: f64,
    pub significant: bool,
    /// True when computed as a 0-to-1 difference rather than a
    /// derivative.
    pub discrete: bool,
}

/// Reference distribution tag for a test statistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dof {
    Chi2(usize),
    /// Even mixture of a point mass at zero and chi-square(1), for
    /// hypotheses pinned to the edge of the parameter space.
    BoundaryMixture,
}

/// A single hypothesis-test outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: Dof,
    pub p_value: f64,
    /// Names of the coefficients under test.
    pub restriction: Vec<String>,
}

/// Outcome of the time-interaction stability refit.
#[derive(Debug)]
pub struct StabilityCheck {
    pub fit: FitResult,
    /// Rate ratios of the covariate-by-trend interaction terms.
    pub interactions: Vec<IrrEntry>,
    pub joint: TestResult,
    /// True when the joint test does not reject or no single
    /// interaction is significant on its own.
    pub stable: bool,
}

/// Exponentiate the design-block coefficients of a count fit.
///
/// A coefficient b becomes the rate ratio exp(b): the multiplicative
/// change in the expected count per unit increase of the covariate.
/// The z statistic is carried over from the coefficient scale, where
/// the delta method leaves it unchanged under exp.
pub fn incidence_rate_ratios(fit: &FitResult) -> Vec<IrrEntry> {
    (0..fit.n_design)
        .map(|j| {
            let z = fit.z(j);
            IrrEntry {
                name: fit.names[j].clone(),
                irr: fit.theta[j].exp(),
                z,
                significant: z.abs() >= Z_CRIT,
            }
        })
        .collect()
}

/// Average marginal effects of a probit fit, averaged over the rows of
/// the design it was estimated on.
///
/// `terms` must be the term list the design was built from; squared and
/// interaction terms are folded into the effect of their base variable,
/// so a variable never appears twice. Variables taking both values 0
/// and 1 and nothing else get the discrete 0-to-1 probability
/// difference; all others get the derivative `phi(xb) * d(eta)/d(var)`.
/// Terms whose column was dropped as collinear contribute nothing.
pub fn average_marginal_effects(
    fit: &FitResult,
    design: &DesignMatrix,
    terms: &[Term],
) -> Result<Vec<AmeEntry>> {
    if fit.model != "probit" {
        return Err(Error::UnsupportedLink(fit.model.clone()));
    }
    if fit.names != design.names {
        return Err(Error::Config(
            "design columns do not match the fitted coefficient names".into(),
        ));
    }
    let n = design.n_rows();
    let beta = &fit.theta;

    // Index of a term's column, None when dropped as collinear.
    let locate = |name: &str| -> Result<Option<usize>> {
        match design.column_index(name) {
            Ok(j) => Ok(Some(j)),
            Err(_) if design.dropped.iter().any(|d| d == name) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut out = Vec::new();
    for term in terms {
        let Term::Var(v) = term else { continue };
        let Some(j) = locate(v)? else { continue };

        let mut square_cols = Vec::new();
        let mut inter_cols = Vec::new();
        for other in terms {
            match other {
                Term::Square(s) if s == v => {
                    if let Some(k) = locate(&other.name())? {
                        square_cols.push(k);
                    }
                }
                Term::Interaction(a, b) if a == v || b == v => {
                    let partner = if a == v { b } else { a };
                    if let (Some(k), Some(pj)) = (locate(&other.name())?, locate(partner)?) {
                        inter_cols.push((k, pj));
                    }
                }
                _ => {}
            }
        }

        let col = design.x.column(j);
        let discrete = col.iter().all(|&v| v == 0.0 || v == 1.0)
            && col.iter().any(|&v| v == 0.0)
            && col.iter().any(|&v| v == 1.0);

        let mut total = 0.0;
        for i in 0..n {
            if discrete {
                let at = |val: f64| {
                    let mut row = design.row(i);
                    row[j] = val;
                    for &k in &square_cols {
                        row[k] = val * val;
                    }
                    for &(k, pj) in &inter_cols {
                        row[k] = val * design.x[(i, pj)];
                    }
                    let eta: f64 = row.iter().zip(beta.iter()).map(|(x, b)| x * b).sum();
                    normal::cdf(eta)
                };
                total += at(1.0) - at(0.0);
            } else {
                let eta: f64 = (0..design.n_cols()).map(|k| design.x[(i, k)] * beta[k]).sum();
                let mut slope = beta[j];
                for &k in &square_cols {
                    slope += 2.0 * beta[k] * design.x[(i, j)];
                }
                for &(k, pj) in &inter_cols {
                    slope += beta[k] * design.x[(i, pj)];
                }
                total += normal::pdf(eta) * slope;
            }
        }

        let z = fit.z(j);
        out.push(AmeEntry {
            name: v.clone(),
            ame: total / n as f64,
            z,
            significant: z.abs() >= Z_CRIT,
            discrete,
        });
    }
    Ok(out)
}

/// Wald test that the named coefficients are jointly zero:
/// W = b' V^-1 b against chi-square with one degree of freedom per
/// coefficient.
pub fn wald_joint(fit: &FitResult, restriction: &[String]) -> Result<TestResult> {
    if restriction.is_empty() {
        return Err(Error::BadRestriction("no coefficients named".into()));
    }
    let mut idx = Vec::with_capacity(restriction.len());
    for name in restriction {
        let j = fit
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::BadRestriction(name.clone()))?;
        idx.push(j);
    }
    let r = idx.len();
    let b = DVector::from_fn(r, |i, _| fit.theta[idx[i]]);
    let v = DMatrix::from_fn(r, r, |i, j| fit.vcov[(idx[i], idx[j])]);
    let sol = match v.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        None => v
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("wald restriction covariance block".into()))?,
    };
    let w = b.dot(&sol).max(0.0);
    Ok(TestResult {
        statistic: w,
        dof: Dof::Chi2(r),
        p_value: chi2_sf(w, r as f64),
        restriction: restriction.to_vec(),
    })
}

/// Likelihood-ratio test of no overdispersion (alpha = 0) between a
/// dispersion-family fit and the Poisson fit on the same data.
///
/// The null pins alpha to the edge of its parameter space, so the
/// statistic is referred to the even mixture of a point mass at zero
/// and chi-square(1) rather than a plain chi-square(1).
pub fn lr_dispersion(fit_nb: &FitResult, fit_pois: &FitResult) -> Result<TestResult> {
    if fit_nb.n_obs != fit_pois.n_obs || fit_nb.n_design != fit_pois.n_design {
        return Err(Error::Config(
            "dispersion test requires fits on the same data and design".into(),
        ));
    }
    let diff = fit_nb.loglik - fit_pois.loglik;
    if diff < -1e-6 {
        return Err(Error::NestingViolation {
            got: fit_nb.loglik,
            bound: fit_pois.loglik,
        });
    }
    let lr = (2.0 * diff).max(0.0);
    Ok(TestResult {
        statistic: lr,
        dof: Dof::BoundaryMixture,
        p_value: 0.5 * chi2_sf(lr, 1.0),
        restriction: vec!["ln_alpha".into()],
    })
}

/// Refit the substantive model with regressor-by-trend interactions
/// (every covariate and the treatment indicator) and test them jointly;
/// a rejection means the coefficients drift over the observation
/// window.
pub fn stability_interactions(panel: &PanelDataset, family: FamilyKind) -> Result<StabilityCheck> {
    let rows = panel.estimation_rows();
    let frame = Frame::from_panel(panel, &rows)?;
    let mut terms = covariate_terms(panel);
    terms.push(Term::var(&panel.names.treatment));
    terms.push(Term::var("trend1"));
    let mut inter: Vec<Term> = panel
        .covariate_names
        .iter()
        .map(|c| Term::interaction(c, "trend1"))
        .collect();
    inter.push(Term::interaction(&panel.names.treatment, "trend1"));
    terms.extend(inter.iter().cloned());

    let design = build_design(&frame, true, &terms)?;
    let y: Vec<u64> = rows.iter().map(|&i| panel.outcome[i].unwrap()).collect();
    let cl: Vec<u64> = rows.iter().map(|&i| panel.cluster[i]).collect();
    let inflation = if family.has_inflation() {
        Some(design.clone())
    } else {
        None
    };
    let fit = fit_count(&design, &y, family, inflation.as_ref(), &cl)?;

    let names: Vec<String> = inter
        .iter()
        .map(|t| t.name())
        .filter(|n| design.names.contains(n))
        .collect();
    let joint = wald_joint(&fit, &names)?;
    let interactions: Vec<IrrEntry> = incidence_rate_ratios(&fit)
        .into_iter()
        .filter(|e| names.contains(&e.name))
        .collect();
    let stable = joint.p_value > 0.05 || interactions.iter().all(|e| !e.significant);
    Ok(StabilityCheck {
        fit,
        interactions,
        joint,
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnNames;

    fn toy_fit(model: &str, names: &[&str], theta: &[f64], vcov: DMatrix<f64>) -> FitResult {
        FitResult {
            model: model.into(),
            names: names.iter().map(|s| s.to_string()).collect(),
            theta: DVector::from_row_slice(theta),
            loglik: -10.0,
            vcov: vcov.clone(),
            vcov_naive: vcov,
            n_obs: 12,
            n_clusters: 6,
            n_design: theta.len(),
            boundary: vec![],
            iterations: 3,
            warnings: vec![],
        }
    }

    fn toy_design(names: &[&str], cols: &[&[f64]]) -> DesignMatrix {
        let n = cols[0].len();
        DesignMatrix {
            names: names.iter().map(|s| s.to_string()).collect(),
            x: DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]),
            dropped: vec![],
        }
    }

    #[test]
    fn chi_square_tail_matches_reference_values() {
        assert!((chi2_sf(4.0, 2.0) - 0.1353352832366127).abs() < 1e-14);
        assert!((chi2_sf(3.84, 1.0) - 0.05004352124870519).abs() < 1e-14);
        assert!((chi2_sf(5.0, 3.0) - 0.1717971442967335).abs() < 1e-14);
        assert_eq!(chi2_sf(0.0, 1.0), 1.0);
    }

    #[test]
    fn rate_ratios_exponentiate_and_carry_z() {
        let fit = toy_fit(
            "nb2",
            &["intercept", "treat"],
            &[0.0, std::f64::consts::LN_2],
            DMatrix::identity(2, 2) * 0.01,
        );
        let irr = incidence_rate_ratios(&fit);
        assert_eq!(irr[0].irr, 1.0);
        assert!((irr[1].irr - 2.0).abs() < 1e-15);
        assert!((irr[1].z - std::f64::consts::LN_2 / 0.1).abs() < 1e-12);
        assert!(!irr[0].significant && irr[1].significant);
        for e in &irr {
            assert!((e.irr.ln() - fit.coef(&e.name).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn wald_matches_the_chi_square_oracle() {
        let fit = toy_fit(
            "probit",
            &["a", "b"],
            &[2.0, 0.0],
            DMatrix::identity(2, 2),
        );
        let t = wald_joint(&fit, &["a".into(), "b".into()]).unwrap();
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert_eq!(t.dof, Dof::Chi2(2));
        assert!((t.p_value - 0.1353352832366127).abs() < 1e-12);

        let reversed = wald_joint(&fit, &["b".into(), "a".into()]).unwrap();
        assert!((reversed.statistic - t.statistic).abs() < 1e-12);
    }

    #[test]
    fn wald_of_zero_coefficients_is_zero_with_p_one() {
        let fit = toy_fit("probit", &["a", "b"], &[0.0, 0.0], DMatrix::identity(2, 2));
        let t = wald_joint(&fit, &["a".into(), "b".into()]).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn wald_rejects_unknown_names_and_singular_blocks() {
        let fit = toy_fit("probit", &["a", "b"], &[1.0, 1.0], DMatrix::zeros(2, 2));
        assert!(matches!(
            wald_joint(&fit, &["missing".into()]),
            Err(Error::BadRestriction(_))
        ));
        assert!(matches!(
            wald_joint(&fit, &[]),
            Err(Error::BadRestriction(_))
        ));
        assert!(matches!(
            wald_joint(&fit, &["a".into(), "b".into()]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn dispersion_test_uses_the_boundary_mixture() {
        let mut nb = toy_fit("nb2", &["a"], &[0.0], DMatrix::identity(1, 1));
        let pois = toy_fit("poisson", &["a"], &[0.0], DMatrix::identity(1, 1));
        nb.loglik = pois.loglik;
        let t = lr_dispersion(&nb, &pois).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 0.5);
        assert_eq!(t.dof, Dof::BoundaryMixture);

        nb.loglik = pois.loglik + 2.0;
        let t = lr_dispersion(&nb, &pois).unwrap();
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert!((t.p_value - 0.5 * 0.04550026389635842).abs() < 1e-14);
    }

    #[test]
    fn dispersion_test_flags_nesting_violations() {
        let mut nb = toy_fit("nb2", &["a"], &[0.0], DMatrix::identity(1, 1));
        let pois = toy_fit("poisson", &["a"], &[0.0], DMatrix::identity(1, 1));
        nb.loglik = pois.loglik - 1e-3;
        assert!(matches!(
            lr_dispersion(&nb, &pois),
            Err(Error::NestingViolation { .. })
        ));
    }

    #[test]
    fn ame_of_a_centered_continuous_covariate_is_the_density_times_slope() {
        let design = toy_design(
            &["intercept", "x"],
            &[&[1.0; 4], &[0.0; 4]],
        );
        let fit = toy_fit("probit", &["intercept", "x"], &[0.0, 1.0], DMatrix::identity(2, 2) * 0.04);
        let ame = average_marginal_effects(&fit, &design, &[Term::var("x")]).unwrap();
        assert_eq!(ame.len(), 1);
        assert!(!ame[0].discrete);
        assert!((ame[0].ame - 0.3989422804014327).abs() < 1e-12);
    }

    #[test]
    fn ame_of_a_binary_covariate_with_zero_coefficient_is_exactly_zero() {
        let design = toy_design(
            &["intercept", "d"],
            &[&[1.0; 4], &[0.0, 1.0, 0.0, 1.0]],
        );
        let fit = toy_fit("probit", &["intercept", "d"], &[0.3, 0.0], DMatrix::identity(2, 2));
        let ame = average_marginal_effects(&fit, &design, &[Term::var("d")]).unwrap();
        assert!(ame[0].discrete);
        assert_eq!(ame[0].ame, 0.0);
    }

    #[test]
    fn ame_with_square_term_flips_sign_past_the_vertex() {
        let at_age = |age: f64| {
            let design = toy_design(
                &["intercept", "age", "age_sq"],
                &[&[1.0], &[age], &[age * age]],
            );
            let fit = toy_fit(
                "probit",
                &["intercept", "age", "age_sq"],
                &[0.0, 0.006, -0.0001],
                DMatrix::identity(3, 3),
            );
            let terms = [Term::var("age"), Term::square("age")];
            average_marginal_effects(&fit, &design, &terms).unwrap()[0].ame
        };
        // vertex at -0.006 / (2 * -0.0001) = 30
        assert!(at_age(20.0) > 0.0);
        assert!(at_age(40.0) < 0.0);
        assert!((at_age(30.0)).abs() < 1e-15);
    }

    #[test]
    fn ame_discrete_difference_updates_linked_interaction_columns() {
        let w = 2.0;
        let design = toy_design(
            &["intercept", "d", "w", "d_x_w"],
            &[&[1.0, 1.0], &[1.0, 0.0], &[w, w], &[w, 0.0]],
        );
        let beta = [0.0, 0.5, 0.2, 0.3];
        let fit = toy_fit(
            "probit",
            &["intercept", "d", "w", "d_x_w"],
            &beta,
            DMatrix::identity(4, 4),
        );
        let terms = [Term::var("d"), Term::var("w"), Term::interaction("d", "w")];
        let ame = average_marginal_effects(&fit, &design, &terms).unwrap();
        let want = normal::cdf(0.5 + 0.2 * w + 0.3 * w) - normal::cdf(0.2 * w);
        assert!(ame[0].discrete);
        assert!((ame[0].ame - want).abs() < 1e-15);

        // the continuous partner chains through the interaction slope,
        // which is live on the d=1 row and dormant on the d=0 row
        let want_w = (normal::pdf(0.5 + 0.2 * w + 0.3 * w) * (0.2 + 0.3)
            + normal::pdf(0.2 * w) * 0.2)
            / 2.0;
        assert!(!ame[1].discrete);
        assert!((ame[1].ame - want_w).abs() < 1e-15);
    }

    #[test]
    fn ame_errors_on_wrong_link_or_missing_linked_column() {
        let design = toy_design(&["intercept", "x"], &[&[1.0; 3], &[0.5, 1.5, 2.5]]);
        let logit = toy_fit("logit", &["intercept", "x"], &[0.0, 1.0], DMatrix::identity(2, 2));
        assert!(matches!(
            average_marginal_effects(&logit, &design, &[Term::var("x")]),
            Err(Error::UnsupportedLink(_))
        ));

        let probit = toy_fit("probit", &["intercept", "x"], &[0.0, 1.0], DMatrix::identity(2, 2));
        let terms = [Term::var("x"), Term::square("x")];
        assert!(matches!(
            average_marginal_effects(&probit, &design, &terms),
            Err(Error::UnknownVariable(_))
        ));
    }

    fn time_homogeneous_panel() -> PanelDataset {
        let persons = 40usize;
        let weeks = 3usize;
        let n = persons * weeks;
        let mut person = Vec::with_capacity(n);
        let mut week = Vec::with_capacity(n);
        let mut load = Vec::with_capacity(n);
        let mut flag = Vec::with_capacity(n);
        let mut treat = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        for p in 0..persons {
            let l = (p % 7) as f64 * 0.5;
            let f = (p % 2) as f64;
            let t = u8::from(p % 3 == 0);
            let y = 1 + (p % 4) as u64 + t as u64;
            for w in 1..=weeks {
                person.push(p as u64);
                week.push(w as u32);
                load.push(l);
                flag.push(f);
                treat.push(Some(t));
                outcome.push(Some(y));
            }
        }
        PanelDataset {
            names: ColumnNames {
                person: "person_id".into(),
                week: "week".into(),
                outcome: "los".into(),
                treatment: "treat".into(),
                selection: "observed".into(),
                cluster: "person_id".into(),
            },
            person: person.clone(),
            week,
            outcome,
            treatment: treat,
            selection: vec![1; n],
            covariate_names: vec!["load".into(), "flag".into()],
            covariates: vec![load, flag],
            instrument_names: vec![],
            instruments: vec![],
            cluster: person,
            census_week: weeks as u32,
        }
    }

    #[test]
    fn stability_check_passes_on_time_homogeneous_data() {
        let panel = time_homogeneous_panel();
        let check = stability_interactions(&panel, FamilyKind::Poisson).unwrap();
        assert_eq!(check.joint.dof, Dof::Chi2(3));
        assert_eq!(check.interactions.len(), 3);
        assert!(check
            .interactions
            .iter()
            .any(|e| e.name == "load_x_trend1"));
        assert!(check
            .interactions
            .iter()
            .any(|e| e.name == "treat_x_trend1"));
        // outcomes never vary within a person, so the trend interactions
        // sit at zero and the joint test cannot reject
        assert!(check.joint.p_value > 0.5);
        assert!(check.stable);
    }
}
