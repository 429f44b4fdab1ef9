//! Grounding 3D scene affordance from egocentric interaction clips.

pub mod bqd;
pub mod config;
pub mod data;
mod error;
pub mod encoders;
pub mod isa;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod train;

pub use error::{Error, Result};
