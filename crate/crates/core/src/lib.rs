//! Unsupervised object localization from self-supervised ViT patch features.
//!
//! The pipeline mines a background seed from attention maps, grows a coarse
//! background mask by feature similarity, refines masks with a fast bilateral
//! solver and self-trains a linear segmentation head on the result.

pub mod bilateral;
pub mod discovery;
pub mod error;
pub mod fixtures;
pub mod head;
pub mod image;
pub mod localize;
pub mod mask;
pub mod metrics;
pub mod npy;
pub mod optim;
pub mod retrieval;
pub mod shard;
pub mod tensors;
pub mod train;

pub use error::{Error, ErrorKind, Result};
