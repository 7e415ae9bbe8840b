pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod raster;
pub mod rng;
pub mod synthdata;
pub mod vae;

pub use error::{Error, Result};
