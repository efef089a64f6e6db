//! Multi-person pose estimation with scalable convolutional backbones.
//!
//! Graphs are declared with [`graph::LayerGraph`], executed on a
//! reverse-mode [`autograd::Tape`] and trained with [`train::train`].

pub mod autograd;
pub mod backbones;
pub mod blocks;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod scaling;
pub mod skeleton;
pub mod supervision;
pub mod tensor;
pub mod train;
pub mod weights;

pub use backbones::BackboneScale;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{LayerGraph, Mode};
pub use model::{build_variant, ModelGraph, Variant, VariantConfig};
pub use supervision::{Keypoint, KeypointAnnotation, SigmaSchedule};
pub use tensor::{Element, ParamStore, Parameter, Shape, Tensor};
