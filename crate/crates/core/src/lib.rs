#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Cropland classification from monthly multi-sensor pixel time series.

pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod map;
pub mod models;
pub mod norm;
pub mod numeric;
pub mod split;
pub mod synthetic;

pub use error::{Error, Result};
