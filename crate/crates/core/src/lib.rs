//! Rebalancing long-tailed classification with out-of-distribution auxiliary
//! data whose labels are drawn from a complementary label distribution.
//!
//! The crate is organised by concern:
//!
//! - [`priors`]: class priors, complementary distributions, class weights and
//!   the baseline weighting schemes.
//! - [`data`]: synthetic long-tailed tasks, auxiliary pools, long-tail
//!   subsampling and on-disk formats.
//! - [`nn`]: a small feedforward classifier with analytic gradients, the
//!   cross-entropy family of losses, SGD with momentum and the learning-rate
//!   schedule.
//! - [`train`]: the open-sampling training loop and its baselines.
//! - [`oracle`]: exact Bayes-mixture calculations on finite probability tables.
//! - [`metrics`]: classification accuracy and OOD-detection scores.
//! - [`cli`]: the config-driven experiment runner behind the `open-rebalance`
//!   binary.

// `!(x >= 0.0)` deliberately rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod priors;
pub mod train;

pub use matrix::Matrix;
