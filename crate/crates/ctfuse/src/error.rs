//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code classes: data/schema problems,
//! sampler initialization, warmup adaptation, and convergence checks.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Header or column-mapping problem in an input file.
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed value in a delimited file, with its 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Per-subject covariates disagree across visits.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Argument outside a distribution's or transform's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Bad key=value configuration file.
    #[error("config error: {0}")]
    Config(String),

    /// No finite starting point found for the sampler.
    #[error("initialization error: {0}")]
    Init(String),

    /// Warmup adaptation failed.
    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
