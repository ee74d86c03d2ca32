//! Core of a single-stage, anchor-based face detector with five-point
//! landmark regression.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! box geometry, the anchor pyramid and target assignment, a small
//! reverse-mode autodiff engine with the convolutional building blocks the
//! detector needs, the multi-task loss with hard example mining, the
//! optimizer, learning-rate schedule and data-parallel step, post-processing (decode, NMS, box
//! voting, test-time augmentation) and the evaluation metrics. File formats,
//! the training driver and the command line live in the `facedet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod anchors;
pub mod annotation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod image;
pub mod loss;
pub mod model;
pub mod optim;
pub mod postprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{iou, BBox, Landmarks, Point};
