// `!(x <= y)`-style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decoding;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod rerank;
mod layers;
pub mod numcore;
pub mod speech;
pub mod synthdata;
pub mod toklm;
pub mod trainer;

pub use error::{Error, Result};
