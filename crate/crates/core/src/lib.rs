//! Panoramic room-layout estimation kernels.

pub mod blocks;
pub mod error;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod polygon;
pub mod render;
pub mod scene;
pub mod sequence;
pub mod sphere;
pub mod suite;
pub mod train;

pub use error::{Error, Result};
