//! Joint ×4 super-resolution and retinal-layer segmentation of OCT-like
//! B-scans with a conditional GAN, evaluated on synthetic layered phantoms.
//!
//! The crate is organized around the stages of the experiment:
//!
//! * [`phantom`] — deterministic synthetic B-scans with ground-truth labels
//! * [`pipeline`] — preprocessing, augmentation, patch extraction, splits
//! * [`autodiff`] / [`nn`] — a small f64 reverse-mode tensor engine and the
//!   layers/optimizer built on it
//! * [`generators`] / [`discriminator`] — the four generator variants and
//!   the 70×70 patch discriminator
//! * [`objectives`] — adversarial / L1 / Dice losses and hard metrics
//! * [`srbaseline`] — bicubic + SR-CNN disjoint super-resolution baseline
//! * [`trainer`] — adversarial training loop, evaluation, checkpoints
//! * [`experiments`] — the 16-row ablation grid and report rendering

pub mod autodiff;
pub mod checkpoint;
pub mod discriminator;
pub mod experiments;
pub mod generators;
pub mod nn;
pub mod objectives;
pub mod palette;
pub mod phantom;
pub mod pipeline;
pub mod srbaseline;
pub mod store;
pub mod trainer;

use thiserror::Error;

/// Unified error type for all fallible operations in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("non-finite loss at {context}: {details}")]
    NonFiniteLoss { context: String, details: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use palette::ClassPalette;

/// Number of segmentation classes: seven retinal layers plus background.
pub const NUM_CLASSES: usize = 8;

/// Side length of a high-resolution patch.
pub const PATCH_HR: usize = 224;

/// Side length of a low-resolution generator input (×4 downsampled patch).
pub const PATCH_LR: usize = 56;

/// Upscale factor between generator input and output.
pub const UPSCALE: usize = 4;
