//! Multi-stage vision-token dropping over a deterministic toy multimodal
//! transformer, with memory/FLOPs accounting and a replayable audit trace.

pub mod cache;
pub mod cost;
pub mod decode;
pub mod encode;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod prefill;
pub mod trace;
pub mod types;

pub use cache::{CacheEntry, KVCache};
pub use error::{Error, Result};
pub use numeric::{Matrix, SeededSource};
pub use types::{Modality, TokenId};
