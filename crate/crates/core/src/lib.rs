//! Adaptive unsupervised partitioning of multi-modal tumor images.
//!
//! Pixels are encoded by a feature-enhanced auto-encoder, clustered into
//! sub-regions with a resampling stability score, summarized per patient by
//! texture features, and split into risk groups whose survival separation is
//! tested with the log-rank test. A Gaussian-process Bayesian optimizer tunes
//! the quantile threshold and cluster count against a joint
//! stability/significance loss.

pub mod bayesopt;
pub mod clustering;
pub mod cohort;
pub mod error;
pub mod fae;
pub mod matrix;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod survival;
pub mod texture;

pub use error::{Error, Result};
pub use matrix::Matrix;
