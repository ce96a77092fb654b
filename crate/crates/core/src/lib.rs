//! Hybrid graph-replay runtime for autoregressive decoding.
//!
//! Static transformer kernels are captured once per sequence length and
//! replayed as a single submission; dynamic kernels (position extension,
//! sampling, KV appends) run as fused blocks. Everything executes on a
//! deterministic [`device::VirtualDevice`] whose cost model turns launch
//! overhead, capture overlap and jitter into measurable virtual time.

pub mod bench;
pub mod cache;
pub mod device;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
