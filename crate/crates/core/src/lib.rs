//! Extreme-value out-of-distribution detection for image classifiers.
//!
//! The per-layer minimum and maximum of the tensors entering each activation
//! layer of a CNN form a compact feature vector. [`xood_m`] scores it with a
//! regularized Mahalanobis distance; [`xood_l`] trains a logistic regression
//! on it using distorted calibration images as surrogate OOD data.

pub mod container;
pub mod data;
pub mod distortions;
pub mod error;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod xood_l;
pub mod xood_m;

pub use error::{Error, Result};
