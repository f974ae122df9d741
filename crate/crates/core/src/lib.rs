//! Multi-focus image fusion.
//!
//! Each source image is scored per pixel by a small convolutional quality
//! network ([`qnn`]). The per-pixel winner forms a binary mask per source and
//! the score spread a shared confidence map ([`focus`]). Each mask is then
//! smoothed edge-aware against its own source on a bilateral grid
//! ([`solver`]), the smoothed masks are normalized into fusion weights, and
//! the sources are blended ([`fusion`]). [`metrics`] holds the objective
//! fusion-quality measures.

pub mod error;
pub mod focus;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod qnn;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
pub use fusion::{run_pipeline, FusionResult, PipelineParams, WeightSigmoid};
pub use image::{GrayImage, Patch32};
pub use metrics::MetricsReport;
pub use qnn::{HyperParams, QnnModel, TrainingSet};
pub use solver::{BilateralGrid, SolverParams};
