//! Forward and backward kernels on raw buffers.

pub mod conv;
pub mod norm;
pub mod pointwise;

pub use conv::{ConvGeom, Padding};
pub use pointwise::Activation;
