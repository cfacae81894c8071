//! Pipeline commands behind the `clearflow` binary: dataset rendering and
//! validation, training, inference, evaluation and adapter merging.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod files;
pub mod infer;
pub mod merge;
pub mod train;

pub use error::{CliError, Result};
