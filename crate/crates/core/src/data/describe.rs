//! Descriptive statistics for a panel.
//!
//! Each variable is summarized once over all rows and once over the
//! estimation sample (selected rows with observed treatment). Binary
//! columns report a share, integer-valued columns a median, and the
//! rest a mean.

use super::panel::PanelDataset;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Share,
    Median,
    Mean,
}

impl StatKind {
    fn label(self) -> &'static str {
        match self {
            StatKind::Share => "share",
            StatKind::Median => "median",
            StatKind::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariableSummary {
    pub name: String,
    pub stat: StatKind,
    pub all: f64,
    pub selected: f64,
}

#[derive(Debug, Clone)]
pub struct PanelDescription {
    pub n_rows: usize,
    pub n_rows_selected: usize,
    pub n_persons: usize,
    pub variables: Vec<VariableSummary>,
}

fn stat_kind(values: &[f64]) -> StatKind {
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        StatKind::Share
    } else if values.iter().all(|&v| v.fract() == 0.0) {
        StatKind::Median
    } else {
        StatKind::Mean
    }
}

fn summarize(values: &[f64], stat: StatKind) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    match stat {
        StatKind::Share | StatKind::Mean => {
            values.iter().sum::<f64>() / values.len() as f64
        }
        StatKind::Median => {
            let mut v = values.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
    }
}

pub fn describe(panel: &PanelDataset) -> PanelDescription {
    let est: Vec<usize> = panel.estimation_rows();
    let mut variables = Vec::new();

    let mut push = |name: &str, all: Vec<f64>, selected: Vec<f64>| {
        let stat = stat_kind(&all);
        variables.push(VariableSummary {
            name: name.to_string(),
            stat,
            all: summarize(&all, stat),
            selected: summarize(&selected, stat),
        });
    };

    let y_all: Vec<f64> = panel.outcome.iter().flatten().map(|&y| y as f64).collect();
    let y_sel: Vec<f64> = est
        .iter()
        .filter_map(|&i| panel.outcome[i])
        .map(|y| y as f64)
        .collect();
    push(&panel.names.outcome, y_all, y_sel);

    let t_all: Vec<f64> = panel.treatment.iter().flatten().map(|&t| t as f64).collect();
    let t_sel: Vec<f64> = est
        .iter()
        .filter_map(|&i| panel.treatment[i])
        .map(|t| t as f64)
        .collect();
    push(&panel.names.treatment, t_all, t_sel);

    for (name, col) in panel
        .covariate_names
        .iter()
        .zip(&panel.covariates)
        .chain(panel.instrument_names.iter().zip(&panel.instruments))
    {
        let all = col.clone();
        let selected = est.iter().map(|&i| col[i]).collect();
        push(name, all, selected);
    }

    PanelDescription {
        n_rows: panel.n_rows(),
        n_rows_selected: est.len(),
        n_persons: panel.n_persons(),
        variables,
    }
}

impl fmt::Display for PanelDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_width = self
            .variables
            .iter()
            .map(|v| v.name.len() + v.stat.label().len() + 3)
            .chain(["persons".len()])
            .max()
            .unwrap_or(8)
            .max("variable".len());
        writeln!(
            f,
            "{:<name_width$}  {:>12}  {:>12}",
            "variable", "all rows", "estimation"
        )?;
        writeln!(f, "{:-<1$}", "", name_width + 28)?;
        writeln!(
            f,
            "{:<name_width$}  {:>12}  {:>12}",
            "rows", self.n_rows, self.n_rows_selected
        )?;
        writeln!(
            f,
            "{:<name_width$}  {:>12}  {:>12}",
            "persons", self.n_persons, ""
        )?;
        for v in &self.variables {
            let label = format!("{} ({})", v.name, v.stat.label());
            writeln!(
                f,
                "{:<name_width$}  {:>12.3}  {:>12.3}",
                label, v.all, v.selected
            )?;
        }
        Ok(())
    }
}
