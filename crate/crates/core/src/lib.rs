//! Ensemble-based uncertainty quantification for binary image segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine, a mini U-Net
//! style segmenter, Deep Ensemble / MC-Dropout inference with pixelwise
//! uncertainty measures, ensemble distillation (KL and contrastive), a
//! training loop, calibration and segmentation metrics, and the file
//! formats that tie a desk-scale experiment together.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
