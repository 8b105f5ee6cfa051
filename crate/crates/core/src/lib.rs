//! 360-degree monocular depth estimation from equirectangular panoramas.

// Negated float comparisons are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depthnet;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod posenet;
pub mod resample;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
