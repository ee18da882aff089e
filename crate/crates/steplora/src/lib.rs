//! A miniature denoising-diffusion training and sampling engine built
//! around timestep-interval low-rank adapters.
//!
//! The pipeline has three stages. A small dense noise-prediction network is
//! trained from scratch (`base`). Its linear layers then host banks of
//! low-rank adapters, one adapter per interval of a uniform timestep
//! partition, trained one interval at a time over the frozen base
//! (`foster`). Finally the adapters themselves freeze and per-layer routers
//! learn to blend the finest-partition expert (applied as-is) with gated
//! experts from coarser partitions (`assemble`).
//!
//! Everything runs in f64 with bit-reproducible reductions, a counter-based
//! RNG, and a finite-difference oracle wired against every training loss.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod report;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
