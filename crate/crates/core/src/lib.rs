#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod cli;
pub mod error;
pub mod field;
pub mod kernel;
pub mod loglaplace;
pub mod quad;
pub mod simulate;
pub mod specfun;
pub mod verify;

pub use error::{Error, Result};
