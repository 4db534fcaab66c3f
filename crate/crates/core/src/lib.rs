//! Generalization error predictors built from sample-level scores.
//!
//! The crate estimates a model's accuracy on an unlabeled target set by
//! thresholding per-sample scores (max softmax confidence, augmentation
//! smoothness, ensemble agreement) at a level calibrated on labeled
//! validation data, and benchmarks those estimates on synthetic
//! distribution shifts, corrupted training data and a simplicity-bias
//! stressor.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the benchmark runners use.

pub mod datagen;
pub mod gep;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod scoring;

pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Mlp = nn::MlpModel<f64>;
pub type Mlp32 = nn::MlpModel<f32>;
pub type Dataset = datagen::LabeledDataset<f64>;
pub type Dataset32 = datagen::LabeledDataset<f32>;
pub type Scores = scoring::ScoreVector<f64>;
pub type Ensemble = scoring::Ensemble<f64>;
pub type Threshold = gep::Threshold<f64>;
