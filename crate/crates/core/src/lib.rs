//! Precipitation nowcasting pipeline.
//!
//! The crate is organized around the stages of a nowcasting experiment:
//!
//! - [`grid`]: raster data model and the on-disk dataset format
//! - [`synth`]: deterministic synthetic radar-echo scenes
//! - [`partition`]: block-sequence train/val/test splitting and window slicing
//! - [`transform`]: log(x+1) compression and z-score standardization
//! - [`patchwork`]: ring-interpolating patch extraction, tiling and reassembly
//! - [`autodiff`]: small reverse-mode tape used by losses and models
//! - [`losses`]: SSIM, weighted SSIM, weighted MSE and the combined objective
//! - [`models`]: U-net, ConvLSTM and SVG-LP sequence predictors
//! - [`trainer`]: optimization loop, checkpoints, prediction
//! - [`verify`]: per-lead-time MAE / F1 scoring and the persistence baseline

pub mod autodiff;
pub mod config;
pub mod grid;
pub mod losses;
pub mod models;
pub mod partition;
pub mod patchwork;
pub mod plot;
pub mod synth;
pub mod trainer;
pub mod transform;
pub mod verify;

pub use grid::{Channel, DatasetManifest, FrameSequence, GridGeometry, RasterFrame};
pub use losses::LossConfig;
pub use models::ModelConfig;
pub use partition::{SplitId, SplitPlan, WindowSample};
pub use patchwork::PatchSpec;
pub use synth::SceneConfig;
pub use trainer::TrainConfig;

use thiserror::Error;

/// Error type shared by the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cadence violation between t={0} and t={1} (expected step {2} min)")]
    Cadence(i64, i64, i64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
