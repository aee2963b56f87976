//! Text-conditioned segmentation of unpaired CT and MR volumes.
//!
//! A vision backbone produces a deep encoder map and a full-resolution
//! decoder map. A controller turns a frozen text embedding of a
//! modality-specific prompt, together with pooled image features, into the
//! weights of a tiny per-voxel network that emits one sigmoid map per class.
//! Training alternates single-modality CT and MR batches with one optimizer
//! step each.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod backbone;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod training;

pub use error::{Error, Result};
pub use modseg_tensor::Scalar;

pub type Segmenter32 = model::Segmenter<f32>;
pub type Segmenter64 = model::Segmenter<f64>;
pub type Volume32 = domain::Volume<f32>;
pub type Volume64 = domain::Volume<f64>;
pub type PatchBatch32 = domain::PatchBatch<f32>;
