//! Multimodal stress estimation pipeline: ingestion and alignment of facial
//! coefficient, biosignal and gaze streams, feature engineering, phase-wise
//! MD-ND statistics, PCA/LDA stress axes, Transformer classifiers with
//! unimodal, early-fusion and cross-modal attention variants, subject-wise
//! cross-validation, and a synthetic session generator.

pub mod data_model;
pub mod dataset;
pub mod error;
pub mod features;
pub mod stats;
pub mod subspace;
pub mod synth;
pub mod traineval;
pub mod matrix;
pub mod model;

pub use error::{Error, Result};
pub use matrix::Matrix;
