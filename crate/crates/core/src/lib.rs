//! Multi-image summarization: caption a group of image embeddings that share
//! a concept.
//!
//! The pipeline aggregates a group's embeddings ([`aggregate`]), encodes the
//! resulting feature rows with a small Transformer and decodes a caption
//! ([`model`], [`decode`]). [`train`] holds the optimizer, the training loop
//! and the ablation harnesses; [`data`] generates and persists synthetic
//! groups; [`metrics`] scores captions with CIDEr-D, BLEU-4 and ROUGE-L.

pub mod aggregate;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
