//! Gated sparse attention, end to end, on a deterministic from-scratch
//! numeric core.
//!
//! The crate implements a causal attention layer whose context selection is
//! driven by a small learned scorer (the "indexer"), two sigmoid gates around
//! the value path and the attention output, an adaptive per-query selection
//! budget, the two-phase training recipe that teaches the indexer to imitate
//! dense attention before sparsifying, and an instrumented cost model that
//! validates the claimed complexity empirically.
//!
//! Everything is built for desk-scale experiments: plain `Vec`-backed
//! tensors, a reverse-mode tape, a counter-based RNG, and bit-reproducible
//! runs from a single seed.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod indexer;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
