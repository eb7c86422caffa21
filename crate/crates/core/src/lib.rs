//! Fay-Herriot small area estimation with a smoothed design-variance model.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod design;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod frame;
pub mod inference;
pub mod numeric;
pub mod rng;
pub mod runner;
pub mod spatial;

pub use error::{Error, Result};
