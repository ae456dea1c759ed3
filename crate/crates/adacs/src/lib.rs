//! Adaptive code-switching normalization.
//!
//! A bias-attention-augmented encoder/tagger/decoder that identifies spoken-form
//! foreign phrases in ASR-style text and rewrites them to their written form,
//! steered at inference time by a user-supplied bias list. Ships with a synthetic
//! data pipeline and a WER / N-WER / CS-WER evaluation harness.
//!
//! Module map:
//! - [`text`]: character vocabulary and tokenization
//! - [`nn`]: tensors, reverse-mode autodiff, transformer building blocks
//! - [`bam`]: the bias attention module (bias bank encoding, scoring, selection, augmentation)
//! - [`model`]: the full network, losses, training loop and the normalize pipeline
//! - [`data`]: synthetic lexicon, spoken-form corruption, pair generation, splits
//! - [`eval`]: alignment, WER attribution, experiment protocol, bias-size sweep

pub mod bam;
pub mod data;
pub mod eval;
pub mod model;
pub mod nn;
pub mod text;

pub use bam::{BiasBank, BiasEntry};
pub use model::{AdaCsModel, LossBreakdown, ModelConfig, Region, Tag, TagSequence};
pub use nn::{Scalar, Tensor};
pub use text::{TokenSeq, Vocabulary};
