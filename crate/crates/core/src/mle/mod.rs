//! Maximum-likelihood engine: objectives, Newton ascent, clustered
//! covariances, and fitted-model containers.

pub mod binary;
pub mod count;
pub mod newton;
pub mod objective;
pub mod result;
pub mod sandwich;

pub use binary::{fit_binary, link_score, BinaryLink, BinaryObjective};
pub use count::{fit_count, CountObjective, BOUNDARY_SENTINEL};
pub use newton::{maximize, BoundaryWatch, NewtonSettings};
pub use objective::{check_gradient, Objective};
pub use result::FitResult;
pub use sandwich::sandwich_vcov;
