//! Differentiable operator substrate: convolutions, projections, pooling
//! and the normalization activation, plus finite-difference checking.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod pool;

pub use conv::{ConvSpec, TransposeSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use pool::{PoolMode, SpatialAxis};
