//! Multi-label 12-lead ECG classification with a squeeze-and-excitation
//! ResNet, built on a small reverse-mode autodiff engine.
//!
//! The pipeline runs `record_io` (header/signal files and the class map) →
//! `preprocess` (257 Hz resampling, length fitting, demographics) → `model`
//! and `training` → `inference` (overlapping patches, fold ensembles) →
//! `metrics` (challenge score, threshold search, kappa). `synth` produces
//! labelled desk-scale data for all of it.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod record_io;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
