//! Retrieval-engineering toolkit for multimodal embedding and reranking models,
//! operating on embedding arrays and logits rather than on the model itself.
//!
//! * [`losses`]: contrastive, classification, CoSent and distillation
//!   objectives with analytic gradients, plus the Matryoshka wrapper.
//! * [`quant`]: int8/binary quantization, LSQ with straight-through gradients
//!   and the quantization-aware loss combinator.
//! * [`mining`]: top-K recall, positive refinement and hard-negative selection.
//! * [`index`], [`metrics`], [`bench`]: exact quantized search and the
//!   dimension × precision tradeoff harness.
//! * [`rerank`]: prompt templates, yes/no scoring and the retrieve-then-rerank pipeline.
//! * [`merge`]: weighted checkpoint merging.

pub mod bench;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod losses;
pub mod gradcheck;
pub mod index;
pub mod matrix;
pub mod merge;
pub mod metrics;
pub mod mining;
pub mod quant;
pub mod rerank;
pub mod synth;
pub mod vector;

pub use error::{Error, Result};
pub use matrix::{EmbeddingMatrix, Rows};
