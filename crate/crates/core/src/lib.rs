//! Desk-scale knowledge distillation of autoregressive sequence models.
//!
//! Students are trained to minimize the sequence-level reverse KL divergence
//! to a teacher with policy-gradient estimators, and every estimator is
//! checked against exact enumeration and finite-difference oracles. The
//! forward-KL baselines (SFT, word-level KD, SeqKD), the evaluation metrics,
//! and a one-dimensional Gaussian mode-seeking demo live alongside.

pub mod cli;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pg;
pub mod stats;
pub mod toy;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ParamVector, Sequence, TabularLM, Token, Vocab};
