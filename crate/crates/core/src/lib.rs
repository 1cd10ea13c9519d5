//! Return-conditioned trajectory transformers for offline reinforcement
//! learning: a small reverse-mode autodiff engine, a causally masked GPT,
//! the trajectory model with its baselines, two desk-scale environments and
//! the experiment tooling around them.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gpt;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
