//! Fully transformer change detection on bi-temporal image pairs.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod enhancement;
pub mod error;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;

pub use error::{FtnError, Result};
pub use model::{Ftn, ModelConfig};
pub use scalar::{DType, Scalar};

pub type Ftn32 = Ftn<f32>;
pub type Ftn64 = Ftn<f64>;
