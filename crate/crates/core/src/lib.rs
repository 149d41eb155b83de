//! Occupancy-field scene reconstruction with distilled open-vocabulary
//! semantics.
//!
//! The crate trains a continuous occupancy field from posed RGB-D frames
//! while distilling per-pixel vision-language features into a 3D semantic
//! field. Per-view semantic measurements are fused into a per-cell log-odds
//! belief that down-weights view-inconsistent supervision during training.
//! Trained fields support mesh extraction, zero-shot 3D/2D segmentation
//! against text embeddings, and open-vocabulary similarity queries.
//!
//! Module overview:
//!
//! * [`grid_field`]: multi-resolution feature grids plus the MLP decoders
//!   for occupancy, color and semantic features.
//! * [`volume_renderer`]: ray sampling and occupancy-weighted compositing of
//!   color, depth and semantic features.
//! * [`scp_fusion`]: log-odds semantic belief grid and per-measurement
//!   confidence weights.
//! * [`objective`]: the five training loss terms and analytic gradients of
//!   the weighted total with respect to every trainable parameter.
//! * [`trainer`]: batch sampling, Adam updates, checkpointing and the
//!   training loop.
//! * [`scene_query`]: occupancy-feature maps, isosurface meshing, zero-shot
//!   segmentation and similarity queries.
//! * [`evaluation`]: reconstruction and segmentation metrics.
//! * [`dataset_io`]: on-disk dataset formats and the synthetic scene
//!   generator used for testing.

// `!(x > 0.0)`-style guards reject NaN along with out-of-range values;
// `x <= 0.0` would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod grid_field;
pub mod objective;
pub mod scene_query;
pub mod scp_fusion;
pub mod trainer;
pub mod volume_renderer;

pub use error::{Error, Result};

/// Class id for pixels and points that carry no class: rays that escape
/// the scene, segmentation renders with no surface, masked ground truth.
pub const VOID_CLASS: u16 = u16::MAX;
