//! Multi-modal (camera + LiDAR) place recognition built on manifold metric
//! attention, neural graph diffusion and window-local fusion.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
mod error;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod model;
pub mod ndm;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod sweep;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
