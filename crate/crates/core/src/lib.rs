//! Sequential recommendation with adaptively constructed contrastive pairs.
//!
//! A causal self-attention encoder is trained on next-item prediction plus an
//! in-batch contrastive objective whose negatives are filtered per anchor by a
//! similarity threshold. The threshold is fixed, a per-row percentile, or the
//! output of a small trainable network regularized toward the previous
//! epoch's percentile; candidates above it can be re-labeled as weighted
//! positives.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod encoder;
pub mod gradcheck;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod params;
mod seed;
pub mod similarity;
pub mod tensor;
pub mod threshold;
pub mod trainer;

pub use error::{Error, Result};
