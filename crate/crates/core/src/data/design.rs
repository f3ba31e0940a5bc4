//! Design-matrix assembly from named columns.
//!
//! A [`Frame`] is a column store for one estimation sample; derived
//! regressors (fitted probabilities, generalized residuals, trends) are
//! added to it under their own names. [`build_design`] turns an ordered
//! term list into a numeric matrix, dropping columns that are constant
//! or linearly dependent on earlier ones.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

use super::panel::PanelDataset;

/// Relative residual-norm threshold below which a column counts as
/// linearly dependent on the columns kept before it.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Frame {
    n_rows: usize,
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl Frame {
    pub fn new(n_rows: usize) -> Self {
        Frame {
            n_rows,
            names: Vec::new(),
            cols: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Columns for a row subset of a panel: covariates and instruments by
    /// name, the week index, and the countdown trend `trend1`. The
    /// treatment column is included only when observed on every subset row.
    pub fn from_panel(panel: &PanelDataset, rows: &[usize]) -> Result<Self> {
        let mut f = Frame::new(rows.len());
        for (name, col) in panel
            .covariate_names
            .iter()
            .zip(&panel.covariates)
            .chain(panel.instrument_names.iter().zip(&panel.instruments))
        {
            f.add(name, rows.iter().map(|&i| col[i]).collect())?;
        }
        f.add(
            &panel.names.week,
            rows.iter().map(|&i| panel.week[i] as f64).collect(),
        )?;
        f.add("trend1", rows.iter().map(|&i| panel.trend1(i)).collect())?;
        if rows.iter().all(|&i| panel.treatment[i].is_some()) {
            f.add(
                &panel.names.treatment,
                rows.iter()
                    .map(|&i| panel.treatment[i].unwrap() as f64)
                    .collect(),
            )?;
        }
        Ok(f)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn add(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows {
            return Err(Error::Config(format!(
                "column `{name}` has {} values, expected {}",
                values.len(),
                self.n_rows
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("column `{name}` added twice")));
        }
        self.index.insert(name.to_string(), self.cols.len());
        self.names.push(name.to_string());
        self.cols.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index
            .get(name)
            .map(|&i| self.cols[i].as_slice())
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

/// One named regressor in a design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Var(String),
    Square(String),
    Interaction(String, String),
}

impl Term {
    pub fn var(name: &str) -> Self {
        Term::Var(name.to_string())
    }

    pub fn square(name: &str) -> Self {
        Term::Square(name.to_string())
    }

    pub fn interaction(a: &str, b: &str) -> Self {
        Term::Interaction(a.to_string(), b.to_string())
    }

    pub fn name(&self) -> String {
        match self {
            Term::Var(v) => v.clone(),
            Term::Square(v) => format!("{v}_sq"),
            Term::Interaction(a, b) => format!("{a}_x_{b}"),
        }
    }

    fn values(&self, frame: &Frame) -> Result<Vec<f64>> {
        match self {
            Term::Var(v) => Ok(frame.column(v)?.to_vec()),
            Term::Square(v) => Ok(frame.column(v)?.iter().map(|x| x * x).collect()),
            Term::Interaction(a, b) => {
                let (a, b) = (frame.column(a)?, frame.column(b)?);
                Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
            }
        }
    }
}

/// Design terms for the study covariates: every covariate enters
/// linearly, and non-binary covariates also enter squared so a
/// curvilinear response (age being the usual case) is not forced
/// through a straight line.
pub fn covariate_terms(panel: &PanelDataset) -> Vec<Term> {
    let mut terms = Vec::new();
    for (name, col) in panel.covariate_names.iter().zip(&panel.covariates) {
        terms.push(Term::var(name));
        if col.iter().any(|&v| v != 0.0 && v != 1.0) {
            terms.push(Term::square(name));
        }
    }
    terms
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    /// Columns removed as constant or linearly dependent, in drop order.
    pub dropped: Vec<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n_cols()).map(|j| self.x[(i, j)]).collect()
    }
}

/// Assemble columns in term order, the intercept first when requested.
///
/// Each candidate column is orthogonalized against the columns already
/// kept; it is dropped when the residual norm falls below `RANK_TOL`
/// times its own norm. With an intercept this also removes constants.
pub fn build_design(frame: &Frame, intercept: bool, terms: &[Term]) -> Result<DesignMatrix> {
    let n = frame.n_rows();
    let mut candidates: Vec<(String, Vec<f64>)> = Vec::new();
    if intercept {
        candidates.push(("intercept".to_string(), vec![1.0; n]));
    }
    for t in terms {
        candidates.push((t.name(), t.values(frame)?));
    }

    let mut names = Vec::new();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dropped = Vec::new();

    for (name, values) in candidates {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::BadValue {
                    row: i,
                    column: name.clone(),
                    reason: "value is not finite".into(),
                });
            }
        }
        let col = DVector::from_vec(values);
        let scale = col.norm();
        let mut resid = col.clone();
        for b in &basis {
            let proj = b.dot(&resid);
            resid.axpy(-proj, b, 1.0);
        }
        if resid.norm() <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            dropped.push(name);
            continue;
        }
        let unit = resid.clone() / resid.norm();
        basis.push(unit);
        kept.push(col);
        names.push(name);
    }

    if kept.is_empty() || n == 0 {
        return Err(Error::EmptyDesign);
    }
    Ok(DesignMatrix {
        names,
        x: DMatrix::from_columns(&kept),
        dropped,
    })
}

/// Raw values of an already-selected column set on a new frame.
///
/// `names` is the kept-column list of a fitted design; each name is
/// resolved against `terms` (or the implicit intercept) and evaluated
/// without any rank filtering, so a model fitted on one row subset can
/// score every row of the panel.
pub fn eval_columns(frame: &Frame, names: &[String], terms: &[Term]) -> Result<DMatrix<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for name in names {
        if name == "intercept" {
            cols.push(vec![1.0; frame.n_rows()]);
            continue;
        }
        let term = terms
            .iter()
            .find(|t| t.name() == *name)
            .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
        cols.push(term.values(frame)?);
    }
    if cols.is_empty() || frame.n_rows() == 0 {
        return Err(Error::EmptyDesign);
    }
    Ok(DMatrix::from_fn(frame.n_rows(), cols.len(), |i, j| {
        cols[j][i]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_frame() -> Frame {
        let mut f = Frame::new(4);
        f.add("age", vec![65.0, 70.0, 80.0, 90.0]).unwrap();
        f.add("female", vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        f.add("ones", vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        f.add("age_copy", vec![65.0, 70.0, 80.0, 90.0]).unwrap();
        f
    }

    #[test]
    fn intercept_leads_and_names_follow_terms() {
        let d = build_design(
            &toy_frame(),
            true,
            &[Term::var("age"), Term::square("age"), Term::interaction("age", "female")],
        )
        .unwrap();
        assert_eq!(d.names, vec!["intercept", "age", "age_sq", "age_x_female"]);
        assert_eq!(d.x[(2, 2)], 6400.0);
        assert_eq!(d.x[(1, 3)], 0.0);
        assert_eq!(d.x[(3, 3)], 90.0);
        assert!(d.dropped.is_empty());
    }

    #[test]
    fn constant_column_drops_under_intercept() {
        let d = build_design(&toy_frame(), true, &[Term::var("ones"), Term::var("age")]).unwrap();
        assert_eq!(d.names, vec!["intercept", "age"]);
        assert_eq!(d.dropped, vec!["ones"]);
    }

    #[test]
    fn constant_column_survives_without_intercept() {
        let d = build_design(&toy_frame(), false, &[Term::var("ones"), Term::var("age")]).unwrap();
        assert_eq!(d.names, vec!["ones", "age"]);
    }

    #[test]
    fn duplicate_column_drops() {
        let d = build_design(
            &toy_frame(),
            true,
            &[Term::var("age"), Term::var("age_copy"), Term::var("female")],
        )
        .unwrap();
        assert_eq!(d.names, vec!["intercept", "age", "female"]);
        assert_eq!(d.dropped, vec!["age_copy"]);
    }

    #[test]
    fn linear_combination_drops() {
        let mut f = toy_frame();
        let combo: Vec<f64> = f
            .column("age")
            .unwrap()
            .iter()
            .zip(f.column("female").unwrap())
            .map(|(a, b)| 2.0 * a - 3.0 * b + 5.0)
            .collect();
        f.add("combo", combo).unwrap();
        let d = build_design(
            &f,
            true,
            &[Term::var("age"), Term::var("female"), Term::var("combo")],
        )
        .unwrap();
        assert_eq!(d.names, vec!["intercept", "age", "female"]);
        assert_eq!(d.dropped, vec!["combo"]);
    }

    #[test]
    fn near_collinear_column_above_tolerance_is_kept() {
        let mut f = toy_frame();
        let nudged: Vec<f64> = f
            .column("age")
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, a)| a + if i == 0 { 1e-4 } else { 0.0 })
            .collect();
        f.add("age_nudged", nudged).unwrap();
        let d = build_design(&f, true, &[Term::var("age"), Term::var("age_nudged")]).unwrap();
        assert_eq!(d.names, vec!["intercept", "age", "age_nudged"]);
    }

    #[test]
    fn unknown_variable_is_reported() {
        let err = build_design(&toy_frame(), true, &[Term::var("income")]).unwrap_err();
        assert!(matches!(err, Error::UnknownVariable(v) if v == "income"));
    }

    #[test]
    fn empty_design_is_an_error() {
        let err = build_design(&toy_frame(), false, &[]).unwrap_err();
        assert!(matches!(err, Error::EmptyDesign));
    }

    #[test]
    fn original_values_are_preserved_after_rank_checks() {
        let d = build_design(&toy_frame(), true, &[Term::var("age"), Term::var("female")]).unwrap();
        assert_relative_eq!(d.x[(0, 1)], 65.0);
        assert_relative_eq!(d.x[(3, 2)], 1.0);
        assert_eq!(d.column_index("female").unwrap(), 2);
    }

    #[test]
    fn eval_columns_scores_new_rows_in_name_order() {
        let terms = vec![Term::var("age"), Term::square("age"), Term::var("female")];
        let d = build_design(&toy_frame(), true, &terms).unwrap();
        let mut other = Frame::new(2);
        other.add("age", vec![50.0, 60.0]).unwrap();
        other.add("female", vec![0.0, 1.0]).unwrap();
        let x = eval_columns(&other, &d.names, &terms).unwrap();
        assert_eq!(x.nrows(), 2);
        assert_eq!(x.ncols(), 4);
        assert_eq!(x[(0, 0)], 1.0);
        assert_eq!(x[(1, 1)], 60.0);
        assert_eq!(x[(1, 2)], 3600.0);
        assert_eq!(x[(0, 3)], 0.0);
    }

    #[test]
    fn eval_columns_rejects_names_without_a_matching_term() {
        let frame = toy_frame();
        let err = eval_columns(&frame, &["income".to_string()], &[Term::var("age")]).unwrap_err();
        assert!(matches!(err, Error::UnknownVariable(v) if v == "income"));
    }

    #[test]
    fn frame_from_panel_carries_trend_and_treatment() {
        use crate::data::schema::SchemaMap;
        let csv = "person_id,week,los,treat,observed,age,female,rural,cg_dementia,cg_learning,cg_physical,comorbid,area_uptake,deprivation\n\
                   1,1,3,1,1,70,1,0,0,0,1,0,0.11,5\n\
                   1,2,4,1,1,70,1,0,0,0,1,0,0.11,5\n\
                   2,1,0,0,1,83,0,0,1,0,0,1,0.08,2\n";
        let panel = PanelDataset::ingest(csv.as_bytes(), &SchemaMap::standard()).unwrap();
        let f = Frame::from_panel(&panel, &[0, 1, 2]).unwrap();
        assert_eq!(f.column("trend1").unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(f.column("week").unwrap(), &[1.0, 2.0, 1.0]);
        assert_eq!(f.column("treat").unwrap(), &[1.0, 1.0, 0.0]);
        assert_eq!(f.column("deprivation").unwrap(), &[5.0, 5.0, 2.0]);
    }

    #[test]
    fn frame_omits_treatment_when_partially_missing() {
        use crate::data::schema::SchemaMap;
        let csv = "person_id,week,los,treat,observed,age,female,rural,cg_dementia,cg_learning,cg_physical,comorbid,area_uptake,deprivation\n\
                   1,1,3,1,1,70,1,0,0,0,1,0,0.11,5\n\
                   2,1,0,,1,83,0,0,1,0,0,1,0.08,2\n";
        let panel = PanelDataset::ingest(csv.as_bytes(), &SchemaMap::standard()).unwrap();
        let f = Frame::from_panel(&panel, &[0, 1]).unwrap();
        assert!(!f.has("treat"));
        assert!(f.has("age"));
    }
}
