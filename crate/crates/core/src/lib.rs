//! Compact deep-metric-learning engine built on involution and convolution
//! feature extractors, trained from scratch with cross-entropy or
//! multi-similarity objectives, with exact top-k cosine retrieval over the
//! learned embeddings.
//!
//! The crate is organized along the pipeline: [`tensor`] holds the dense
//! numeric primitives, [`layers`] the forward and backward passes, [`losses`]
//! and [`optim`] the training objectives and Adam, [`data`] the binary
//! dataset loaders and batch plans, [`models`] the architecture presets with
//! training and serialization, [`search`] the embedding gallery and
//! retrieval, and [`gradcheck`] the finite-difference verification suites.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pnm;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{extract_patches, matmul, pad_zero, PatchMatrix, Tensor};
