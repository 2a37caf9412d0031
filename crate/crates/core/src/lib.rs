//! Relation-aware self-attention with clipped relative position
//! representations.
//!
//! The crate contains a small `f64` tensor core with reverse-mode
//! differentiation ([`numerics`]), the clipped relative-position edge
//! machinery ([`relpos`]), three attention kernels ([`attention`]), a
//! post-norm encoder stack ([`model`]) and a toy-task training harness
//! ([`training`]). The `relattn` binary wraps these in a CLI ([`cli`]).

pub mod error;
pub mod numerics;
pub mod relpos;
pub mod attention;
pub mod model;
pub mod training;
pub mod cli;

pub use error::{Error, Result};
