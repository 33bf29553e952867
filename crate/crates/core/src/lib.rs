//! Training engine for click-through-rate models that learn to rank better
//! than a previously deployed model.
//!
//! The crate is organised bottom-up:
//!
//! * [`features`]: hashing, CSV ingestion, temporal splits, synthetic drift streams.
//! * [`models`]: sparse LR / FM / DeepFM-lite predictors with analytic gradients,
//!   Adagrad updates and a checksummed snapshot format.
//! * [`losses`]: cross-entropy, confidence ranking (point-wise and relational),
//!   and the KD / logit-RKD baselines.
//! * [`metrics`]: AUC, accuracy, margin diagnostics and model-vs-model ranking scores.
//! * [`pipeline`]: serve-then-retrain cycles and multi-epoch training with a
//!   previous-epoch teacher.

pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pipeline;

pub use error::{Error, ErrorKind, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
