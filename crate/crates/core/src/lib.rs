//! Particle-filter planning for partially observed linear systems.

pub mod analysis;
pub mod config;
pub mod cli;
pub mod coupled;
pub mod error;
pub mod linalg;
pub mod lowerbound;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod pf;
pub mod presets;
pub mod rng;

pub use error::{Error, Result};
