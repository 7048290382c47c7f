//! Probabilistic forecasting of series with gaps.
//!
//! The window of recent lags and the forecast target are modeled jointly by a
//! variational auto-encoder with a Student's t decoder and a normalizing-flow
//! posterior, trained on observed coordinates only through an
//! importance-weighted bound. Forecasts come from ancestral sampling followed
//! by self-normalized importance resampling, so missing lags are integrated
//! out rather than filled in beforehand.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation
//! - [`nn`]: MLPs, Adam, checkpoints
//! - [`dist`]: Gaussian / Student's t densities, logit transform
//! - [`flow`]: affine autoregressive flow chain
//! - [`missing`]: masks, MCAR/MAR simulation, zero imputation
//! - [`data`]: CSV ingestion, windows, splits
//! - [`genmodel`]: the generative model and its training loop
//! - [`forecast`]: proposal, weighting, resampling
//! - [`eval`]: CRPS, reliability, sharpness, pinball loss
//! - [`bench`]: climatology and impute-then-predict baselines

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forecast;
pub mod genmodel;
pub mod missing;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
