//! Training, evaluation and command-line tooling around `facedet-core`:
//! dataset formats, synthetic data, crop augmentation, the training driver,
//! checkpoints, detection dumps and reports.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod imageio;
pub mod labels;
pub mod mat;
pub mod points;
pub mod report;
pub mod synth;
pub mod trainer;
pub mod wider;

pub use error::{Error, Result};
