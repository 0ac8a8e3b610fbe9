//! Slow cascade low-rank adaptation on a desk-scale backbone.
//!
//! The crate trains a small network, freezes it, and fine-tunes it with a
//! cascade of low-rank experts: each expert is trained against a noise-perturbed
//! copy of the backbone, folded into a slowly-moving average pair, and merged.
//! Vanilla LoRA and a plain cascade (optimizer restarts only) are available as
//! baselines, and every stage can be switched off for ablations.

pub mod adapter;
pub mod cascade;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numkit;
pub mod optim;

pub use error::{Error, Result};
pub use numkit::{DType, Matrix, RngState, Scalar};
