//! Fisher-information-regularized joint source-channel coding for
//! classification over noisy channels.
//!
//! An encoder maps inputs to a power-limited representation `z`, a channel
//! perturbs it, and a decoder classifies the received `ẑ`. Training adds a
//! penalty proportional to the trace of the decoder's Fisher information
//! at `z`, which approximates the expected KL divergence between the
//! noise-free and noisy posteriors.

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod data;
pub mod error;
pub mod experiments;
pub mod models;
pub mod rng;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
