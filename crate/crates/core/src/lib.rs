//! Desk-scale adversarial machine learning engine.
//!
//! Trains small convolutional binary image classifiers on synthetic (or
//! user-supplied) image data and runs a full attack suite against them:
//! iterative L∞ projected-gradient-descent attacks, universal adversarial
//! patches trained under random placement, natural-patch controls, and
//! black-box transfer variants of each. Evaluation reports accuracy, AUROC,
//! and mean confidence per condition, and a hash registry detects any
//! post-capture pixel manipulation at the file layer.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); the shipped pipeline runs on `f64` so
//! that gradient checks and serialized artifacts are precision-confound-free.
//! Concrete `f64` aliases live at the crate root.

pub mod attacks;
pub mod classifier;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod provenance;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar type used by the shipped pipeline.
pub type Scalar64 = f64;
/// Dense `f64` tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Autodiff tape over `f64` tensors.
pub type Tape64 = tensor::Tape<f64>;
/// Labeled `f64` image.
pub type LabeledImage64 = data::LabeledImage<f64>;
/// Dataset of `f64` images.
pub type Dataset64 = data::Dataset<f64>;
/// Trained `f64` classifier.
pub type Model64 = classifier::ClassifierModel<f64>;
/// Adversarial patch over `f64` pixels.
pub type Patch64 = attacks::Patch<f64>;
