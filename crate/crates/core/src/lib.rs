//! Heston calibration by Gauss–Newton / Levenberg–Marquardt, with exact
//! operators for removing quotes from a calibrated model.
//!
//! - [`pricing`]: characteristic-function call pricer and finite-difference Jacobians.
//! - [`market_sim`]: synthetic paths, quote grids, time shards, dataset files.
//! - [`calibration`]: residuals, normal-equation assembly, damped solves, LM loop.
//! - [`unlearn_cache`]: per-quote sufficient statistics and their on-disk format.
//! - [`forgetting`]: full retrain, sharded recompute, data-free fast refactor,
//!   and the stability diagnostics.

pub mod calibration;
pub mod error;
pub mod forgetting;
pub mod linalg;
pub mod market_sim;
pub mod pricing;
pub mod unlearn_cache;

pub use error::{Error, Result};
pub use pricing::{
    char_fn, price_call, FdPolicy, HestonParams, HestonPricer, Prob, QuadratureConfig,
    QuoteFeatures, N_PARAMS, PARAM_NAMES,
};
