//! Unsupervised cross-lingual word embedding mapping.
//!
//! A single linear map is first learned adversarially; the source space is
//! then clustered with FINCH, target words are assigned to the source
//! clusters through the transposed map, and one multi-discriminator GAN per
//! subspace learns a piecewise-linear map. Procrustes refinement with
//! stochastic dictionary induction and CSLS-based lexicon induction
//! evaluation complete the pipeline.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod clustering;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gan;
pub mod mapping;
pub mod multi_gan;
pub mod numerics;
pub mod pipeline;
pub mod refinement;
pub mod retrieval;
pub mod synthetic;

pub use error::{ClweError, Result};
