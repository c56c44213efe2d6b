//! Lightweight sentiment heads on top of frozen vision-language embeddings.
//!
//! Two heads are supported: a cross-entropy classifier and a contrastive
//! projection trained against text-prompt embeddings. Classification with the
//! contrastive head (or with raw embeddings, zero-shot) is cosine-argmax over
//! an arbitrary prompt bank, so it works with any taxonomy.

#![allow(clippy::needless_range_loop)]

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod numcore;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
