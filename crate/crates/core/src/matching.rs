//! Propensity-score matching baseline.
//!
//! Scores come from a binary model of treatment on the study
//! covariates, gaps in the score vector are filled from the nearest
//! opposite-group rows, and each treated row is matched to its
//! nearest-scoring control with replacement. The average treatment
//! effect is the mean outcome difference over matched pairs with a
//! normal-approximation p-value from the pair differences.

use crate::data::{build_design, covariate_terms, eval_columns, Frame, PanelDataset};
use crate::dist::normal;
use crate::error::{Error, Result};
use crate::mle::{fit_binary, BinaryLink, FitResult};

/// One matched treated/control pair of panel row indices.
#[derive(Debug, Clone)]
pub struct MatchPair {
    pub treated: usize,
    pub control: usize,
    /// Absolute propensity-score gap at match time.
    pub gap: f64,
}

/// Full audit record of a matching run.
#[derive(Debug)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub ate: f64,
    pub se: f64,
    pub p_value: f64,
    /// Treated estimation rows skipped for lack of a usable score.
    pub unmatched: Vec<usize>,
    pub score_model: FitResult,
}

/// Fit the treatment propensity model on the rows with observed
/// treatment and score every row of the panel.
///
/// The design is the study covariates only (squares included for
/// non-binary ones): the instruments stay out so the score reflects
/// the covariate balance the matching is meant to repair.
pub fn estimate_propensity(
    panel: &PanelDataset,
    link: BinaryLink,
) -> Result<(Vec<f64>, FitResult)> {
    let rows = panel.treatment_rows();
    let y: Vec<u8> = rows.iter().map(|&i| panel.treatment[i].unwrap()).collect();
    if y.iter().all(|&v| v == 1) || y.iter().all(|&v| v == 0) {
        return Err(Error::NoMatchCandidates);
    }
    let frame = Frame::from_panel(panel, &rows)?;
    let design = build_design(&frame, true, &covariate_terms(panel))?;
    let cl: Vec<u64> = rows.iter().map(|&i| panel.cluster[i]).collect();
    let fit = fit_binary(&design, &y, link, &cl)?;

    // Score all rows, not only the fitted ones: the design is a pure
    // function of the covariates, which are complete everywhere.
    let all: Vec<usize> = (0..panel.n_rows()).collect();
    let full = Frame::from_panel(panel, &all)?;
    let x = eval_columns(&full, &fit.names, &covariate_terms(panel))?;
    let eta = &x * &fit.theta;
    let scores = eta.iter().map(|&e| link.prob(e)).collect();
    Ok((scores, fit))
}

/// Fill NaN gaps in a score vector with the mean score of the `k`
/// nearest opposite-treatment-group rows, nearness measured by
/// Euclidean distance on standardized covariates.
///
/// Rows whose treatment status is itself missing are left untouched,
/// since they have no opposite group.
pub fn impute_propensity(scores: &[f64], panel: &PanelDataset, k: usize) -> Result<Vec<f64>> {
    if scores.len() != panel.n_rows() {
        return Err(Error::Config(format!(
            "{} scores for {} panel rows",
            scores.len(),
            panel.n_rows()
        )));
    }
    let n = panel.n_rows();
    let p = panel.covariate_names.len();

    // Standardize each covariate over the full panel; constant columns
    // carry no distance information and are skipped.
    let mut scale = Vec::with_capacity(p);
    for col in &panel.covariates {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        scale.push((mean, var.sqrt()));
    }
    let distance = |a: usize, b: usize| {
        let mut d = 0.0;
        for (col, &(mean, sd)) in panel.covariates.iter().zip(&scale) {
            if sd > 0.0 {
                let diff = (col[a] - mean) / sd - (col[b] - mean) / sd;
                d += diff * diff;
            }
        }
        d.sqrt()
    };

    let mut out = scores.to_vec();
    for i in 0..n {
        if !scores[i].is_nan() {
            continue;
        }
        let Some(t) = panel.treatment[i] else { continue };
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&j| panel.treatment[j] == Some(1 - t) && scores[j].is_finite())
            .map(|j| (distance(i, j), j))
            .collect();
        if candidates.len() < k {
            return Err(Error::Config(format!(
                "row {i}: needs {k} scored rows in the opposite treatment group, found {}",
                candidates.len()
            )));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out[i] = candidates[..k].iter().map(|&(_, j)| scores[j]).sum::<f64>() / k as f64;
    }
    Ok(out)
}

/// Match every treated estimation row to the control with the nearest
/// score, with replacement.
///
/// Treated rows are processed in ascending row order and ties go to
/// the lowest control row index, so the result is deterministic.
/// Returns the pairs and the treated rows without a usable score.
pub fn match_nearest(
    scores: &[f64],
    panel: &PanelDataset,
) -> Result<(Vec<MatchPair>, Vec<usize>)> {
    if scores.len() != panel.n_rows() {
        return Err(Error::Config(format!(
            "{} scores for {} panel rows",
            scores.len(),
            panel.n_rows()
        )));
    }
    let sample = panel.estimation_rows();
    let controls: Vec<usize> = sample
        .iter()
        .copied()
        .filter(|&i| panel.treatment[i] == Some(0) && scores[i].is_finite())
        .collect();
    let treated: Vec<usize> = sample
        .iter()
        .copied()
        .filter(|&i| panel.treatment[i] == Some(1))
        .collect();
    if controls.is_empty() || treated.is_empty() {
        return Err(Error::NoMatchCandidates);
    }

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for &t in &treated {
        if !scores[t].is_finite() {
            unmatched.push(t);
            continue;
        }
        let mut best = controls[0];
        let mut best_gap = (scores[t] - scores[best]).abs();
        for &c in &controls[1..] {
            let gap = (scores[t] - scores[c]).abs();
            if gap < best_gap {
                best = c;
                best_gap = gap;
            }
        }
        pairs.push(MatchPair {
            treated: t,
            control: best,
            gap: best_gap,
        });
    }
    Ok((pairs, unmatched))
}

/// Average treatment effect over matched pairs, with its standard
/// error and a normal-approximation p-value from the pair differences.
pub fn estimate_ate(pairs: &[MatchPair], panel: &PanelDataset) -> Result<(f64, f64, f64)> {
    if pairs.len() < 2 {
        return Err(Error::Config(format!(
            "average treatment effect needs at least 2 matched pairs, got {}",
            pairs.len()
        )));
    }
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let yt = panel.outcome[p.treated].unwrap() as f64;
            let yc = panel.outcome[p.control].unwrap() as f64;
            yt - yc
        })
        .collect();
    let n = diffs.len() as f64;
    let ate = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - ate).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let p_value = if se == 0.0 {
        if ate == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        2.0 * normal::cdf(-(ate / se).abs())
    };
    Ok((ate, se, p_value))
}

/// The full matching pipeline: score, impute gaps, match, estimate.
pub fn run_psm(panel: &PanelDataset, link: BinaryLink, k: usize) -> Result<MatchResult> {
    let (scores, score_model) = estimate_propensity(panel, link)?;
    let scores = impute_propensity(&scores, panel, k)?;
    let (pairs, unmatched) = match_nearest(&scores, panel)?;
    let (ate, se, p_value) = estimate_ate(&pairs, panel)?;
    Ok(MatchResult {
        pairs,
        ate,
        se,
        p_value,
        unmatched,
        score_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnNames;

    /// A panel of single-week rows with one continuous covariate.
    fn panel_with(treat: &[u8], outcome: &[u64], x: &[f64]) -> PanelDataset {
        let n = treat.len();
        PanelDataset {
            names: ColumnNames {
                person: "person_id".into(),
                week: "week".into(),
                outcome: "los".into(),
                treatment: "treat".into(),
                selection: "observed".into(),
                cluster: "person_id".into(),
            },
            person: (0..n as u64).collect(),
            week: vec![1; n],
            outcome: outcome.iter().map(|&y| Some(y)).collect(),
            treatment: treat.iter().map(|&t| Some(t)).collect(),
            selection: vec![1; n],
            covariate_names: vec!["x".into()],
            covariates: vec![x.to_vec()],
            instrument_names: vec![],
            instruments: vec![],
            cluster: (0..n as u64).collect(),
            census_week: 1,
        }
    }

    #[test]
    fn intercept_only_scores_are_the_treated_share() {
        let mut panel = panel_with(&[1, 0, 1, 0], &[3, 2, 4, 1], &[0.0; 4]);
        panel.covariate_names.clear();
        panel.covariates.clear();
        let (scores, fit) = estimate_propensity(&panel, BinaryLink::Probit).unwrap();
        assert_eq!(fit.names, vec!["intercept"]);
        for s in scores {
            assert!((s - 0.5).abs() < 1e-8);
        }
    }

    #[test]
    fn one_class_panels_cannot_be_scored() {
        let panel = panel_with(&[1, 1, 1], &[3, 2, 4], &[0.1, 0.5, 0.9]);
        assert!(matches!(
            estimate_propensity(&panel, BinaryLink::Probit),
            Err(Error::NoMatchCandidates)
        ));
    }

    #[test]
    fn imputation_copies_a_zero_distance_neighbor() {
        let panel = panel_with(&[1, 0, 0], &[3, 2, 4], &[0.7, 0.7, 0.1]);
        let scores = [f64::NAN, 0.35, 0.9];
        let filled = impute_propensity(&scores, &panel, 1).unwrap();
        assert_eq!(filled[0], 0.35);
        assert_eq!(filled[1], 0.35);
        assert_eq!(filled[2], 0.9);
    }

    #[test]
    fn imputation_averages_equidistant_neighbors() {
        let panel = panel_with(&[1, 0, 0, 0], &[3, 2, 4, 1], &[0.5, 0.5, 0.5, 0.5]);
        let scores = [f64::NAN, 0.2, 0.4, 0.6];
        let filled = impute_propensity(&scores, &panel, 3).unwrap();
        assert!((filled[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn imputation_is_the_identity_on_complete_vectors() {
        let panel = panel_with(&[1, 0], &[3, 2], &[0.7, 0.3]);
        let scores = [0.6, 0.4];
        assert_eq!(impute_propensity(&scores, &panel, 1).unwrap(), scores);
    }

    #[test]
    fn imputation_requires_enough_opposite_rows() {
        let panel = panel_with(&[1, 0], &[3, 2], &[0.7, 0.3]);
        let scores = [f64::NAN, 0.4];
        assert!(impute_propensity(&scores, &panel, 2).is_err());
    }

    #[test]
    fn nearest_control_wins_regardless_of_direction() {
        let panel = panel_with(&[1, 0, 0], &[5, 3, 2], &[0.0, 0.0, 0.0]);
        let scores = [0.50, 0.48, 0.51];
        let (pairs, unmatched) = match_nearest(&scores, &panel).unwrap();
        assert!(unmatched.is_empty());
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].control, 2);
        assert!((pairs[0].gap - 0.01).abs() < 1e-15);
    }

    #[test]
    fn score_ties_go_to_the_lowest_control_index() {
        let panel = panel_with(&[1, 0, 0], &[5, 3, 2], &[0.0, 0.0, 0.0]);
        let scores = [0.5, 0.5, 0.5];
        let (pairs, _) = match_nearest(&scores, &panel).unwrap();
        assert_eq!(pairs[0].control, 1);
        assert_eq!(pairs[0].gap, 0.0);
    }

    #[test]
    fn exact_duplicates_match_at_zero_gap() {
        let panel = panel_with(&[1, 1, 0, 0], &[5, 4, 3, 2], &[0.0; 4]);
        let scores = [0.3, 0.8, 0.8, 0.3];
        let (pairs, _) = match_nearest(&scores, &panel).unwrap();
        assert!(pairs.iter().all(|p| p.gap == 0.0));
        assert_eq!(pairs[0].control, 3);
        assert_eq!(pairs[1].control, 2);
    }

    #[test]
    fn matching_is_invariant_to_affine_score_transforms() {
        let panel = panel_with(
            &[1, 1, 0, 0, 0],
            &[5, 4, 3, 2, 6],
            &[0.0; 5],
        );
        let scores = [0.31, 0.74, 0.28, 0.66, 0.91];
        let shifted: Vec<f64> = scores.iter().map(|s| 0.25 + 0.5 * s).collect();
        let (a, _) = match_nearest(&scores, &panel).unwrap();
        let (b, _) = match_nearest(&shifted, &panel).unwrap();
        let pairs = |v: &[MatchPair]| v.iter().map(|p| (p.treated, p.control)).collect::<Vec<_>>();
        assert_eq!(pairs(&a), pairs(&b));
        let (ate_a, _, _) = estimate_ate(&a, &panel).unwrap();
        let (ate_b, _, _) = estimate_ate(&b, &panel).unwrap();
        assert_eq!(ate_a, ate_b);
    }

    #[test]
    fn adding_a_control_weakly_shrinks_every_gap() {
        let base = panel_with(&[1, 1, 0], &[5, 4, 3], &[0.0; 3]);
        let more = panel_with(&[1, 1, 0, 0], &[5, 4, 3, 2], &[0.0; 4]);
        let scores3 = [0.3, 0.7, 0.45];
        let scores4 = [0.3, 0.7, 0.45, 0.69];
        let (before, _) = match_nearest(&scores3, &base).unwrap();
        let (after, _) = match_nearest(&scores4, &more).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(a.gap <= b.gap);
        }
    }

    #[test]
    fn identical_pair_outcomes_give_a_zero_effect() {
        let panel = panel_with(&[1, 1, 0, 0], &[4, 2, 4, 2], &[0.0; 4]);
        let scores = [0.2, 0.8, 0.21, 0.79];
        let (pairs, _) = match_nearest(&scores, &panel).unwrap();
        let (ate, _, p) = estimate_ate(&pairs, &panel).unwrap();
        assert_eq!(ate, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn pair_differences_average_into_the_effect() {
        // gaps force pairings (0->4), (1->5), (2->6), (3->7) with
        // differences -1, -1, +1, -1
        let panel = panel_with(
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[2, 3, 5, 1, 3, 4, 4, 2],
            &[0.0; 8],
        );
        let scores = [0.1, 0.3, 0.5, 0.7, 0.11, 0.31, 0.51, 0.71];
        let (pairs, _) = match_nearest(&scores, &panel).unwrap();
        let (ate, _, p) = estimate_ate(&pairs, &panel).unwrap();
        assert_eq!(ate, -0.5);
        assert!(p > 0.05 && p < 1.0);
    }

    #[test]
    fn full_run_produces_an_audit_trail() {
        let treat = [1, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1];
        let outcome = [6, 3, 5, 2, 7, 4, 6, 3, 5, 8, 2, 7];
        let x = [0.9, 0.2, 0.3, 0.8, 0.7, 0.4, 0.9, 0.1, 0.6, 0.2, 0.5, 0.7];
        let panel = panel_with(&treat, &outcome, &x);
        let res = run_psm(&panel, BinaryLink::Probit, 1).unwrap();
        assert_eq!(res.pairs.len(), 6);
        assert!(res.unmatched.is_empty());
        assert_eq!(res.score_model.model, "probit");
        assert!(res.ate.is_finite() && res.p_value > 0.0 && res.p_value <= 1.0);
        for p in &res.pairs {
            assert_eq!(panel.treatment[p.treated], Some(1));
            assert_eq!(panel.treatment[p.control], Some(0));
        }
    }
}
