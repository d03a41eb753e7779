//! Multi-modal segmentation with modality exchange and cross-attention fusion.
//!
//! Two co-registered inputs (a T1-weighted-like structural map and an
//! FA-like diffusion map) pass through per-modality encoders that swap
//! information at every level, are fused at the bottleneck by cross
//! attention, and are decoded by a U-shaped decoder into a binary mask.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exchange;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
