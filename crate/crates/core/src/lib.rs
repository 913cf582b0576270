//! Gap-filling of cloud-occluded surface temperature with a physics-guided
//! convolutional model, transformation to near-surface air temperature, and
//! calibrated snapshot-ensemble prediction intervals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod air_transformer;
pub mod amplifier;
pub mod atc;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::GridStack;
pub use tensor::Tensor;
