//! Axis projection attention U-Net for small-target 3D segmentation.

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
