//! Column-role mapping for delimited ingestion.
//!
//! A schema document names which CSV column carries each variable role.
//! Missing values travel as empty fields, so every named column must exist
//! in the header even when some of its cells are blank.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Maps variable roles to column names. `cluster` defaults to the person
/// column; `census_week` defaults to the largest observed week.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaMap {
    pub person: String,
    pub week: String,
    pub outcome: String,
    pub treatment: String,
    pub selection: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub instruments: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub census_week: Option<u32>,
}

/// Names that the design builder reserves for derived columns.
pub const RESERVED_NAMES: &[&str] = &["intercept", "trend1", "treat_hat", "xi", "treat_x_xi", "xi_sel"];

impl SchemaMap {
    /// The column layout produced by the synthetic generator and accepted
    /// by every command when no schema document is given.
    pub fn standard() -> Self {
        SchemaMap {
            person: "person_id".into(),
            week: "week".into(),
            outcome: "los".into(),
            treatment: "treat".into(),
            selection: "observed".into(),
            covariates: vec![
                "age".into(),
                "female".into(),
                "rural".into(),
                "cg_dementia".into(),
                "cg_learning".into(),
                "cg_physical".into(),
                "comorbid".into(),
            ],
            instruments: vec!["area_uptake".into(), "deprivation".into()],
            cluster: None,
            census_week: None,
        }
    }

    pub fn cluster_column(&self) -> &str {
        self.cluster.as_deref().unwrap_or(&self.person)
    }

    /// Reject duplicate role assignments and reserved names. The cluster
    /// column is the one role allowed to share a column (usually with
    /// person).
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        let singles = [
            &self.person,
            &self.week,
            &self.outcome,
            &self.treatment,
            &self.selection,
        ];
        for name in singles
            .into_iter()
            .chain(self.covariates.iter())
            .chain(self.instruments.iter())
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::RoleConflict(name.clone()));
            }
        }
        for name in seen {
            if RESERVED_NAMES.contains(&name) {
                return Err(Error::Config(format!(
                    "column name `{name}` is reserved for derived regressors"
                )));
            }
        }
        Ok(())
    }
}
