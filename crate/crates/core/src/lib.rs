#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constellations;
pub mod delay_estimation;
pub mod error;
pub mod harness;
pub mod ofdm;
pub mod optimizer;
pub mod sensing;
pub mod stats;

pub use error::{Error, Result};
