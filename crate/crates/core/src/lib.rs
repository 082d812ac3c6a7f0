//! A small CNN augmented with global attention agreement, plus the tooling
//! to train, probe and export it.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod export;
pub mod gradcheck;
pub mod seed;
pub mod tensor;
pub mod training;

pub use attention::{AttentionParams, LesionMask, RunOptions};
pub use autodiff::{Gradients, Tape, Var};
pub use backbone::{BackboneModel, FrozenBackbone, ToyCnnConfig};
pub use data::ImageDataset;
pub use error::{Error, Result};
pub use tensor::Tensor;
