//! Gradient sensitivity maps for small image classifiers.
//!
//! The crate trains a convolutional MNIST classifier (or a linear probe) on
//! its own reverse-mode autodiff engine and explains its decisions with
//! vanilla gradients, SmoothGrad, Integrated Gradients and Guided
//! Backpropagation, plus the rendering steps needed to look at the maps.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
