//! Algorithmic core of the dual-prototype cross-market recommender.
//!
//! Everything in this crate is pure computation over in-memory data and builds
//! without `std` (an allocator is required). File formats, configuration and
//! the command-line driver live in the companion `dgre` crate.
//!
//! The pipeline, in order:
//!
//! 1. [`data`]: multi-market implicit-feedback datasets, filtering, leave-one-out
//!    splits, negative sampling and a planted-structure generator.
//! 2. [`graph`]: user co-interaction graph over all markets and one item
//!    co-interaction graph per market.
//! 3. [`gnn`]: sampled mean-aggregation encoders trained by link prediction.
//! 4. [`user_proto`]: modularity communities, landmark prototypes, student-t
//!    soft assignments and their sharpened self-training target.
//! 5. [`market_proto`]: discriminator-based vertex selection and weighted
//!    pooling into one vector per market.
//! 6. [`heads`]: GMF / MLP / NMF scoring heads with optional prototype gating.
//! 7. [`eval`]: sampled leave-one-out ranking with HR@K and nDCG@K.
//!
//! [`pipeline`] chains the stages and drives the ablations.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod heads;
pub mod market_proto;
pub mod math;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod user_proto;

pub use error::{Error, Result};
