//! Truncated diffusion fine-tuning on toy 2-D data.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod condition;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nn;
pub mod npo;
pub mod oracle;
pub mod plot;
pub mod schedule;
pub mod tdft;
pub mod train;
pub mod validate;

pub use condition::Condition;
pub use error::{Error, Result};
