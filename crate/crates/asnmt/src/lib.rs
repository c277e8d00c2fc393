//! Toy sequence-to-sequence transformer toolkit with auto-sizing.
//!
//! Auto-sizing trains a pre-norm transformer encoder–decoder under a
//! group regularizer (l2,1 or l∞,1) applied through exact proximal steps
//! interleaved with the optimizer, so whole rows of parameter matrices —
//! whole neurons — reach exactly 0.0 during training. A structural
//! compaction pass then deletes the dead rows together with their paired
//! columns, provably shrinking the stored model without changing its
//! function.
//!
//! The pipeline runs end to end from the `asnmt` binary:
//! generate a toy corpus, train with a chosen regularizer scope, prune
//! the zero groups out of the checkpoint, evaluate with beam search, and
//! render a size/quality comparison table.

pub mod autosize;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod prox;
pub mod runconfig;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
