//! Gated log-sparse transformer toolkit for sign → gloss → text translation.
//!
//! The encoder splits each frame embedding into two channel halves: one goes
//! through a same-length convolution, the other through stacked log-sparse
//! self-attention fused with a global-average-pooled value summary by a
//! learned per-position gate. A standard transformer decoder produces gloss
//! tokens and then text tokens conditioned on the predicted gloss.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod sparse_attention;
pub mod training;

pub use error::{GlotError, Result};
