//! Panel data: schema mapping, ingestion, design matrices, descriptives.

pub mod describe;
pub mod design;
pub mod panel;
pub mod schema;

pub use describe::{describe, PanelDescription};
pub use design::{build_design, covariate_terms, eval_columns, DesignMatrix, Frame, Term};
pub use panel::{ColumnNames, PanelDataset};
pub use schema::SchemaMap;
