//! Unsupervised skill discovery by state-density deviation.
//!
//! A soft-modularised conditional VAE estimates every skill's state density;
//! a density-deviation reward separates skills and a latent-KL reward drives
//! exploration inside each skill. Exact tabular oracles check the objective's
//! relationship to mutual information and to count-based exploration.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod analysis;
pub mod density;
pub mod diffnet;
pub mod env;
mod error;
pub mod io;
pub mod parallel;
pub mod rewards;

pub use error::{Result, Sd3Error};
