//! Error type shared across the crate.
//!
//! Variants are grouped by failure domain so the CLI can map them onto
//! distinct exit codes: schema/config problems, estimation problems, and
//! orchestration problems.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    // ---- schema / data / config ----
    #[error("schema refers to column `{0}` which is not in the header")]
    UnknownColumn(String),
    #[error("column `{0}` is assigned to more than one variable role")]
    RoleConflict(String),
    #[error("row {row}: column `{column}`: {reason}")]
    BadValue {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("row {row}: outcome must be present exactly when selection = 1")]
    SelectionOutcomeMismatch { row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    // ---- distribution parameters ----
    #[error("invalid distribution parameter: {0}")]
    BadParameter(String),
    #[error("zero-truncated families have no mass at y = 0")]
    TruncatedZero,

    // ---- design ----
    #[error("design refers to unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("design matrix has no rows after filtering")]
    EmptyDesign,

    // ---- estimation ----
    #[error("log-likelihood is not finite at the starting values")]
    BadStart,
    #[error("optimizer did not converge within {max_iter} iterations (|grad| = {grad_norm:.3e})")]
    NoConvergence { max_iter: usize, grad_norm: f64 },
    #[error("`{column}` separates the outcome: the likelihood keeps improving as its coefficient diverges (guard {limit:.0e})")]
    Separation { column: String, limit: f64 },
    #[error("line search failed to find an ascent step")]
    LineSearchFailed,
    #[error("matrix inversion failed: {0}")]
    Singular(String),
    #[error("test restriction is empty or names unknown coefficients: {0}")]
    BadRestriction(String),
    #[error("unrestricted log-likelihood {got:.6} is below the restricted one {bound:.6}; models are not nested as assumed")]
    NestingViolation { got: f64, bound: f64 },
    #[error("matching needs at least one treated and one control row")]
    NoMatchCandidates,
    #[error("operation requires a probit fit, got link `{0}`")]
    UnsupportedLink(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    // ---- orchestration ----
    #[error("replication budget is zero")]
    NoReplications,
    #[error("resampling did not produce an admissible draw within {0} attempts")]
    ResamplingExhausted(usize),

    // ---- io ----
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("document error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 for schema/config failures, 3 for
    /// estimation failures, 4 for orchestration failures, 5 otherwise.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            UnknownColumn(_) | RoleConflict(_) | BadValue { .. }
            | SelectionOutcomeMismatch { .. } | Config(_) | BadParameter(_)
            | TruncatedZero | UnknownVariable(_) | EmptyDesign => 2,
            BadStart | NoConvergence { .. } | Separation { .. } | LineSearchFailed
            | Singular(_) | BadRestriction(_) | NestingViolation { .. }
            | NoMatchCandidates | UnsupportedLink(_) => 3,
            Stage { source, .. } => source.exit_code(),
            NoReplications | ResamplingExhausted(_) => 4,
            Io(_) | Csv(_) | Json(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
