//! Pixel-wise group-relative policy optimization on a toy rectified-flow
//! image generator.

// `!(x >= lo)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow_model;
pub mod harness;
pub mod numerics;
pub mod psm;
pub mod rewards;
pub mod sde_sampler;
pub mod trainer;

pub use error::{Error, Result};
