//! Random Young towers with exponential return-time tails.
//!
//! [`env`] draws the i.i.d. environment, [`tower`] builds fibers, cylinders and
//! cover partitions, [`ops`] holds the transfer operators and densities,
//! [`cones`] certifies cone contraction and [`limits`] runs the limit-theorem
//! experiments against exact cylinder sums.

// `!(x > 0.0)` rejects NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cones;
pub mod env;
pub mod error;
pub mod limits;
pub mod observable;
pub mod ops;
pub mod stats;
pub mod tower;

pub use error::{Error, Result};

/// Library version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
