//! Topology-aware block-sparse attention over whole-slide patch grids.
//!
//! A slide is a grid of patch features. The grid is cut into `k×k` packs, each
//! followed by a summary token, with one global token in front. Attention is
//! restricted to four interactions: everything sees the global token, patches
//! see their own pack, summaries see their pack's patches, and summaries see
//! each other.

pub mod attention;
pub mod checkpoint;
pub mod connector;
pub mod error;
pub mod grid;
pub mod numerics;
pub mod pretrain;
pub mod roi;
pub mod synth;
pub mod topomask;
pub mod train;

pub use error::{Error, Result};
