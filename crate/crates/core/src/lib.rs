//! Thermal-to-visible face synthesis toolkit: a small autodiff tensor engine,
//! axial-attention GAN models, losses, synthetic paired data, training, and
//! image-quality / face-verification evaluation.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, Tape, Tensor, TensorId};
