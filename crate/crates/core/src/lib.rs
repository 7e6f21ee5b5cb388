//! Single-path one-shot architecture search: a small autograd engine, a
//! weight-sharing supernet, cost models, path samplers, supernet training and
//! constrained evolutionary search.

// Bounds checks use `!(x > 0.0)` so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod sampler;
pub mod search;
pub mod space;
pub mod train;

pub use error::{Error, Result};
