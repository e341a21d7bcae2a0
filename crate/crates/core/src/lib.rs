//! Convolutions with learnable, continuous tap positions.
//!
//! [`irrconv`] holds the operator: bilinear sampling at fractional tap
//! offsets, the interpolated im2col, the forward product and the analytic
//! gradients for weights, inputs and positions. [`nn`] and [`optim`] wrap it
//! into small trainable segmentation networks; [`oracle`] provides the
//! brute-force references used to check it; [`cli`] implements the `icnn`
//! command-line tool.

pub mod cli;
pub mod error;
pub mod irrconv;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use irrconv::{IrregularKernel, Offset, PositionSet};
pub use nn::{Arch, LabelMap, LayerSpec, Network};
pub use optim::{TrainConfig, Trainer};
pub use tensor::{Rng, Tensor};
