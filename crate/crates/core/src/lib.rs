//! Semi-supervised object detection training lab.
//!
//! A desk-scale mean-teacher SSOD framework around a small anchor-based
//! one-stage detector: multi-scale feature extraction, adaptive pseudo-label
//! assignment with per-class dual thresholds, per-epoch threshold
//! re-estimation, gradient-reversal domain adaptation, and mosaic/MixPL
//! augmentation, with a reproducible synthetic-data experiment.
//!
//! All numeric code is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the default training precision.

pub mod augment;
pub mod config;
pub mod data;
pub mod detector;
pub mod epoch;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod multiscale;
pub mod pseudo;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training precision.
pub type Real = f32;

pub type BBoxF = geometry::BBox<Real>;
pub type DetectionSetF = geometry::DetectionSet<Real>;
pub type DatasetF = data::Dataset<Real>;
pub type TrainerF = trainer::Trainer<Real>;
