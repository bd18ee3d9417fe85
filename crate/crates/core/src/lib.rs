// `!(x > 0.0)` also rejects NaN; index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod error;
pub mod experiment;
pub mod lcmv;
pub mod linalg;
pub mod metrics;
pub mod relaxed;
pub mod scene;
pub mod signals;
pub mod socp;
pub mod stft;

pub use error::{Error, Result};
