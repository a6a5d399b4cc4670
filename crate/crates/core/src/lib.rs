//! Cross-domain transfer for binary text classification.
//!
//! The pipeline has four stages:
//!
//! 1. [`meta`] trains a general classifier over every domain with
//!    episodic (support/query) bilevel optimization.
//! 2. [`lm`] trains a masked language model on the target domain.
//! 3. [`lm::score_sources`] turns the pseudo-perplexity of that model on each
//!    source instance into a transferability weight `w = 1/pp`.
//! 4. [`adapt`] fine-tunes the general classifier on target instances plus
//!    weighted source instances.
//!
//! [`data`] handles ingestion and tokenization, [`nn`] holds the parameter
//! store, reverse-mode differentiation and optimizers, and [`eval`] computes
//! F1, accuracy, ROC AUC and standardized partial AUC.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod meta;
pub mod nn;
pub mod util;

pub use error::{Error, Result};
