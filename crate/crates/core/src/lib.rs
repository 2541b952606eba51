//! Parasitic speculative decoding over a shared KV cache.
//!
//! A desk-scale encoder-decoder translation model (speech-feature encoder,
//! text encoder, pruned decoder) carries a small drafting network whose
//! attention reads the base decoder's cached keys and values directly. The
//! [`engine`] interleaves base steps, drafts, and top-k validation.

pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod engine;
pub mod harness;
pub mod kvpsn;
pub mod model;
pub mod train;
