pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
