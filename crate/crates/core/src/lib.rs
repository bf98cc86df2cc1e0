//! Backdoor defense at desk scale.
//!
//! Poisoned inputs are detected from per-layer feature trajectories by fusing
//! a Mahalanobis-distance score over CH-selected layers with a spectral score
//! of the inter-layer differences. A backdoored classifier is then purified by
//! training low-rank adapters on a student copy to diverge from the frozen
//! teacher on flagged inputs while keeping clean accuracy.

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backdoor_lab;
pub mod calibration;
pub mod error;
pub mod feature_store;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod toy_model;
pub mod unlearn;

pub use error::{Error, Result};
