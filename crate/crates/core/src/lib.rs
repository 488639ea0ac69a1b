pub mod assignment;
pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod detmodel;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod losses;
pub mod masa;
pub mod nn;
pub mod postprocess;
pub mod raddata;
pub mod scalar;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

/// Single-precision model used for training and inference.
pub type Model = detmodel::DetModel<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = detmodel::DetModel<f64>;
pub type Cube = raddata::RadCube<f32>;
pub type Frame = raddata::FrameRecord<f32>;
pub type Trainer = train::Trainer<f32>;
