//! Copy-move forgery detection with multi-directional similarity maps.
//!
//! A query is resampled to 256x256, expanded into four quarter-turn rotations
//! and four 2x zoom patches, and encoded by a frozen convolutional backbone.
//! Every augmented frame is paired with the upright frame; each pair's dense
//! cosine-affinity tensor is decoded cell by cell by a small classifier over
//! 3x3 neighbourhoods of 2-D similarity maps. The eight per-pair candidate
//! masks are mapped back to the base frame and fused by a per-pixel maximum.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod forgegen;
pub mod imaging;
pub mod nn;
pub mod similarity;
pub mod trainer;

pub use error::{Error, Result};
