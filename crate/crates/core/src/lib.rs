//! Desk-scale BERT-style encoder pipeline.
//!
//! The crate is organized around six subsystems:
//!
//! - [`tensor`]: dense f32/f64 tensors with reverse-mode automatic
//!   differentiation, just enough operations to express a transformer
//!   encoder and its training losses.
//! - [`tokenizer`]: Arabic-aware normalization, affix pre-segmentation and
//!   a WordPiece-style subword vocabulary (training, encoding, decoding).
//! - [`data`]: corpus ingestion, sentence handling, masked-language-model
//!   example construction with whole-word masking, task dataset loaders,
//!   batching and synthetic dataset generation.
//! - [`model`]: the configurable encoder with MLM, sequence-classification
//!   and token-tagging heads.
//! - [`train`]: Adam with linear warmup/decay, gradient accumulation,
//!   validation-loss early stopping and binary checkpoints.
//! - [`metrics`]: confusion matrices, macro-averaged precision/recall/F1,
//!   IOB utilities and report emission.

pub mod tensor;

pub use tensor::{IdTensor, Tensor, NO_LABEL};
