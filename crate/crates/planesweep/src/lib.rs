//! Plane-sweep multi-view stereo with per-pixel non-uniform depth sampling.
//!
//! The engine estimates depth for a reference view from N calibrated images
//! by sweeping hypothesis planes, aggregating photometric cost across views,
//! and regressing depth from the cost volume. A four-stage coarse-to-fine
//! cascade refines the estimate at increasing resolution; from stage two on,
//! the hypothesis planes are placed per pixel by a data-driven sampling
//! distribution instead of an equally spaced grid. Filtered depth maps are
//! fused into a point cloud.

pub mod cascade;
pub mod costvol;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub(crate) mod nn;
pub mod sampler;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
