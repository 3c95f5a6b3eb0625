// Index loops mirror the matrix formulas, and `!(x >= 0.0)` style guards
// deliberately reject NaN along with out-of-range values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod card;
pub mod costmodel;
pub mod error;
pub mod io;
pub mod linalg;
pub mod quadratic;
pub mod residual;
pub mod rng;
pub mod toynet;
pub mod verify;

pub use error::{Error, Result};
