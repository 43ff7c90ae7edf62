//! Adaptive constant-rate padding against website fingerprinting.
//!
//! Traces are padded with a Tamaraw-style schedule. Traces of a site are
//! clustered into loading patterns, patterns are grouped into anonymity sets,
//! and an early detector lets a client switch from a global padding schedule
//! to a cheaper per-set schedule once the set is known.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod anonymity;
pub mod attack;
pub mod bound;
pub mod detector;
pub mod error;
pub mod patterns;
pub mod pipeline;
pub mod synth;
pub mod tamaraw;
pub mod trace;

pub use error::{Error, Result};
