//! Treatment-effect estimation for count outcomes on weekly panels.

pub mod data;
pub mod dgp;
pub mod dist;
pub mod error;
pub mod inference;
pub mod matching;
pub mod mc;
pub mod mle;
pub mod report;
pub mod two_stage;

pub use error::{Error, Result};
