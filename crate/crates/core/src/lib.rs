#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chunk;
pub mod cli;
pub mod critic;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod proposal;
pub mod tabular;
pub mod trainer;

pub use chunk::ActionChunk;
pub use error::{Error, Result};
