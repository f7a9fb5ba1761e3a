//! Multi-task unsupervised pretraining with divergence-regularized encoders
//! and temporal task ensembling, plus knowledge transfer and downstream
//! evaluation.

pub mod divergence;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pretext;
pub mod seed;
pub mod store;
pub mod tensor;
pub mod transfer;
pub mod tte;

pub use error::{Error, Result};
