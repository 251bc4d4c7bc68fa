//! A desk-scale laboratory for masked image modeling with stochastic
//! positional embeddings.
//!
//! Config validation writes `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod posembed;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
