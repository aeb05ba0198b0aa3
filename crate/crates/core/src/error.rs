use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Heston parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid quote {quote_id}: {reason}")]
    InvalidQuote { quote_id: u64, reason: String },

    #[error("non-finite integrand at u = {u} (quadrature unsuitable for these parameters)")]
    NonFiniteIntegrand { u: f64 },

    #[error("finite-difference bump for parameter {index} cannot stay inside the valid region (step {step:e})")]
    StepUnderflow { index: usize, step: f64 },

    #[error("system is not positive definite (min eigenvalue {min_eig:e}{})",
        weyl_bound.map(|w| format!(", Weyl lower bound {w:e}")).unwrap_or_default())]
    NotPositiveDefinite { min_eig: f64, weyl_bound: Option<f64> },

    #[error("unknown quote id {0}")]
    UnknownQuoteId(u64),

    #[error("forget set removes every quote; at least one must be retained")]
    EmptyRetainedSet,

    #[error("ridge mismatch: cache built with lambda {cache}, request uses {request}")]
    LambdaMismatch { cache: f64, request: f64 },

    #[error("dataset hash mismatch: cache {cache}, store {store}")]
    DatasetHashMismatch { cache: String, store: String },

    #[error("cache version mismatch: file {found}, supported {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt cache file: {0}")]
    CorruptFile(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
