//! Chunk-wise KV-cache compression with layer-wise adaptive pruning.
//!
//! A long context of demonstrations is split into chunks. Each chunk's KV
//! cache is extracted against the already-compressed memory and then pruned
//! layer by layer, top-down, keeping the smallest retention ratio whose output
//! distribution on the chunk's answer tokens stays within a Jensen–Shannon
//! budget of the unpruned output.

pub mod baselines;
pub mod compressor;
pub mod container;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod kvmem;
pub mod lap;
pub mod model;
pub mod taskgen;

pub use error::{Error, Result};
