//! Concept bottleneck masked language model for protein sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`seqio`]: vocabulary, tokenization, FASTA, masking and synthetic corpora
//! - [`concepts`]: the 14 sequence-derived biophysical concepts and their normalization
//! - [`model`]: encoder, concept bottleneck, orthogonality network and linear decoder,
//!   plus the tag-conditioned and autoregressive variants
//! - [`losses`]: masked-LM, concept and orthogonality losses
//! - [`train`]: AdamW training loop and checkpoints
//! - [`intervene`]: token attribution, coordinate selection and concept interventions
//! - [`evaluate`]: perplexity, intervention accuracy and correlation statistics
//! - [`interpret`]: decoder-weight exports and debugging reports
//! - [`config`]: the single JSON run configuration used by the CLI

pub mod concepts;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod interpret;
pub mod intervene;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod seqio;
pub mod train;

pub use error::{Error, Result};
