//! Core library for `modgate`, a desk-scale image moderation system.
//!
//! The crate is organised by subsystem:
//!
//! - [`catalog`]: product image model, corpus generation and on-disk store
//! - [`signature`]: image descriptors, binarization and Hamming k-NN search
//! - [`synthgen`]: logo superimposition with exact box annotations, anchor k-means
//! - [`detectors`]: template matching, skin-ratio and shallow logistic detectors
//! - [`router`]: L1 category gate deciding which L2 detectors see an image
//! - [`pipeline`]: durable queues, threshold decisions and verdict persistence
//! - [`review`]: budgeted human review and the labeled feedback store
//! - [`evalkit`]: precision/recall/F1, ROC, box matching and threshold tuning

pub mod catalog;
pub mod detectors;
pub mod evalkit;
pub mod pipeline;
pub mod raster;
pub mod review;
pub mod router;
pub mod signature;
pub mod synthgen;

pub use image::{Rgba, RgbaImage};
