pub mod autodiff;
pub mod config;
pub mod data;
pub mod distortion;
pub mod error;
pub mod gradcheck;
pub mod image;
mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod size_augment;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_at, GradCheckReport, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;
