//! Assembled global/local decoding for vision-language models.
//!
//! The pipeline scores how well an image matches a prompt, masks the
//! patches that matter least to that prompt, and decodes from a blend of the
//! logits produced on the original and masked views. A small deterministic
//! testbed stands in for a real model.

pub mod bench;
pub mod decoding;
mod error;
pub mod masking;
pub mod matching;
pub mod metrics;
pub mod numeric;
pub mod toy;

pub use error::{AglaError, Result};

/// Index into a vocabulary.
pub type TokenId = usize;
