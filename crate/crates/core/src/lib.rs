// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod estimate;
pub mod eval;
pub mod error;
pub mod filter;
pub mod measure;
pub mod optim;
pub mod params;
pub mod sim;
pub mod vix;
pub mod vrp;

pub use error::{Error, Result};
