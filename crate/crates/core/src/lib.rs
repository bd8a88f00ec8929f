//! Desk-scale synthetic image detection.
//!
//! The crate bundles a small reverse-mode autodiff engine, a procedural
//! real/fake image corpus, mixup-based augmentation, a toy ViT encoder with
//! LoRA adapters, hierarchical multi-scale token fusion, a classifier head
//! with Adam training, and an evaluation harness (accuracy, AP, ECE,
//! low-FPR calibration, robustness sweeps, exports, throughput).
//!
//! See `examples/` for one runnable program per capability.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dct;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filters;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pca;
pub mod pipeline;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
