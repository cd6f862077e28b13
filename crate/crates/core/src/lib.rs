//! Worst-case face morphing laboratory.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fr;
pub mod image;
pub mod io;
pub mod morph;
pub mod nn;
pub mod pipeline;
pub mod sphere;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
