//! MOFormer toolkit.
//!
//! Text-based (MOFid) and structure-based (crystal graph) encoders for
//! metal-organic frameworks, cross-modal Barlow Twins pretraining, and
//! scalar property regression on top of either encoder.
//!
//! Everything runs on a small dense-tensor library with a reverse-mode tape
//! ([`tensor`]). Batch-level work (per-sample forward/backward, neighbor
//! lists, embedding export) goes through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise.

pub mod app;
pub mod batch;
pub mod crystal;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod mlp;
pub mod regression;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod text;
pub mod transformer;

pub use error::{Error, Result};
