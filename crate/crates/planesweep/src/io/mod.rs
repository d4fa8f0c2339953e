//! Scene ingestion, file formats and run configuration.

pub mod cams;
pub mod config;
pub mod params;
pub mod pfm;
pub mod pnm;
pub mod ply;
pub mod scene;
