//! Two-phase fine-grained building classification at desk scale:
//! conditional diffusion super-resolution, then a category-balanced,
//! teacher-distilled classifier, with metrics and experiment pipelines.

pub mod cibm;
pub mod classifier;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod orchestration;
pub mod plot;
pub mod seed;

pub use error::{Error, Result};
