//! Residual-noise learning for cross-dose PET denoising, reproduced on
//! synthetic phantoms with Poisson-thinned low-count acquisitions.
//!
//! The crate is organised as a pipeline: [`phantom`] writes a dataset in the
//! [`rasterio`] layout, [`trainer`] fits a [`model`] under the composite
//! [`loss`], and [`evalbench`] scores checkpoints with [`metrics`].
//! [`noisestats`] and [`analysisdoc`] hold the two standalone analyses.

pub mod analysisdoc;
pub mod dose;
pub mod error;
pub mod evalbench;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noisestats;
pub mod phantom;
pub mod rasterio;
pub mod rng;
pub mod trainer;

pub use dose::Dose;
pub use error::{Error, Result};
pub use rasterio::RasterF32;
