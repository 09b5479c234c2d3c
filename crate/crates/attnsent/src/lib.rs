//! Self-attention sentiment classifier: embeddings with subword hashing,
//! sinusoidal position fusion, multi-head attention, squeeze-excite feature
//! gating, and a focal-loss training loop, all with hand-derived gradients.

pub mod attention;
pub mod bench;
pub mod error;
pub mod gru;
pub mod model;
pub mod pe;
pub mod se;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
