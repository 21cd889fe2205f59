//! Desk-scale laboratory for cross-lingual model editing.
//!
//! The crate trains a tiny multilingual transformer on a synthetic parallel
//! corpus, then trains editors that rewrite the model's prediction for an
//! input in one language such that the change carries over to the parallel
//! renderings in every other language while unrelated predictions are kept.
//!
//! Layout mirrors the pipeline:
//!
//! - [`numerics`]: dense f64 tensors with a reverse-mode tape.
//! - [`model`]: the raw transformer classifier, editable-layer taps, and
//!   parameter updates.
//! - [`corpus`]: synthetic parallel corpus generation and edit-batch sampling.
//! - [`editors`]: finetune baseline, gradient-transform editor, and the
//!   language-specific masked variant.
//! - [`training`]: raw-model pretraining and the two-stage editor loop.
//! - [`evaluation`]: acc/con/succ metrics, macro averages, mask similarity.
//! - [`checkpoint`]: the binary container shared by all persisted artifacts.

pub mod checkpoint;
pub mod corpus;
pub mod editors;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;
