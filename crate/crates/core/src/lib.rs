//! Detector for AI-generated video built on cross-modal temporal artifacts.
//!
//! Input is a sequence of paired per-frame visual and caption embeddings.
//! Two branches read it: a GRU over the frame-wise cosine similarity
//! (coarse) and a Transformer encoder over the concatenated embeddings (fine).
//! Their outputs are concatenated and classified as real or generated.
//!
//! All numerics, including reverse-mode differentiation, live in this crate and
//! are generic over [`tensor::Real`]: training uses `f32`, gradient and oracle
//! checks use `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod gru;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod similarity;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{CmtaError, LoadError, Result};
pub use head::AblationVariant;
pub use model::{Model, ModelConfig};
pub use tensor::{Real, Tensor};
