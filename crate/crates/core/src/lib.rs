//! Hierarchical local feature learning with filters that are shared across
//! classes where classes look alike and discriminative where they differ,
//! plus the exemplar selection, coding, pooling and classification stages
//! around it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataio;
pub mod deepstack;
pub mod dsfl;
pub mod encode;
pub mod error;
pub mod exemplar;
pub mod mathkit;
pub mod persist;
pub mod svmlite;
pub mod synth;

pub use error::{Error, FormatError, Result};
