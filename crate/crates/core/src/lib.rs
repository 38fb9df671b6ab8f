//! Multi-view conditioned 3D asset generation: view sampling, cost-volume
//! construction, neural SDF fields, volume rendering, score-distillation
//! refinement, mesh extraction and evaluation metrics.

pub mod binio;
pub mod camera;
pub mod cli;
pub mod config;
pub mod costvolume;
pub mod error;
pub mod features;
pub mod mesh;
pub mod metrics;
pub mod fields;
pub mod nn;
pub mod refine;
pub mod render;

pub use error::{Error, Result};
