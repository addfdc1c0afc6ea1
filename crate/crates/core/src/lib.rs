//! GMM-based mixture density networks for autoregressive modelling of
//! phone-level prosody embeddings.
//!
//! The crate provides:
//!
//! * [`gmm`] — constrained mixture parameters, stable log-density / NLL,
//!   analytic gradients and ancestral sampling for diagonal Gaussian
//!   mixtures;
//! * [`predictor`] — a small convolutional + recurrent sequence model whose
//!   per-step outputs parameterize a mixture over the next embedding, with
//!   exact reverse-mode gradients and Adam training;
//! * [`extractor`] — a toy segment encoder (2-D convolutions, batch norm,
//!   bidirectional recurrence) plus the joint training objective with its
//!   stop-gradient rule;
//! * [`synth`] — a deterministic generator of multi-modal synthetic corpora
//!   with known ground-truth densities;
//! * [`em`] — an independent expectation-maximization oracle for diagonal
//!   mixtures;
//! * [`gradcheck`] — finite-difference verification of every analytic
//!   gradient in the crate.

pub mod em;
pub mod error;
pub mod extractor;
pub mod gmm;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod opt;
pub mod predictor;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
