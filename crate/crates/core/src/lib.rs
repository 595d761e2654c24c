//! Average-K set-valued classification.
//!
//! A two-head network is trained so that a softmax threshold, calibrated on
//! validation data, returns `K` classes per example on average. One head
//! (SCCP) is trained with cross-entropy and proposes batch-level candidate
//! classes; the other (ML) is trained with a multi-label binary
//! cross-entropy on the observed labels plus those candidates and is the
//! only head used for prediction.
//!
//! Modules:
//!
//! * [`math`] – logit/probability matrices and stable numerics
//! * [`losses`] – cross-entropy, assume-negative, positive-only BCE,
//!   expected-positive regularization, multi-label BCE and the joint loss
//! * [`sccp`] – candidate-class proposal
//! * [`calibration`] – threshold calibration, set prediction and metrics
//! * [`model`] / [`training`] – two-head MLP, SGD and early stopping
//! * [`data`] – synthetic Gaussian mixtures with known posteriors, CSV I/O

pub mod calibration;
pub mod data;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod sccp;
pub mod training;

pub use error::{Error, Result};
