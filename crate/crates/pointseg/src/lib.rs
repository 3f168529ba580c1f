//! PointSeg: semantic segmentation of road objects (car, pedestrian, cyclist)
//! in spherical projections of LiDAR point clouds.
//!
//! The pipeline runs in five stages: project a raw scan into a 64x512x5
//! spherical frame, run the convolutional network, take per-pixel argmax,
//! back-project class ids onto the original points, and optionally clean
//! ground points with a RANSAC plane fit. Everything is CPU-only, 32-bit
//! float, and deterministic for a fixed seed.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod projection;
pub mod synth;
pub mod tensor;
pub mod testutil;

pub use error::{Error, Result};
