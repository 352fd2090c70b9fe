//! Weakly supervised object detection trained with a dissimilarity
//! coefficient between two probabilistic detectors.
//!
//! A factorized *prediction* head scores every proposal independently; a
//! noise-driven *conditional* head produces one score matrix per noise draw,
//! from which an exact constrained argmax extracts a labeling that covers
//! every class named in the image-level annotation. The two heads are fit
//! by alternating updates: plain gradient descent for the prediction head
//! and direct loss minimization for the conditional head.
//!
//! Everything runs on synthetic scenes (see [`synthdata`]), with per-proposal
//! feature vectors generated directly instead of pixels.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diversity;
pub mod error;
pub mod evalmetrics;
pub mod loss;
pub mod models;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod trainer;
pub mod types;
pub mod verify;

mod assignment;

pub use error::{Error, Result};
pub use types::{
    BoxGeometry, BoxLabeling, ClassDistribution, GroundTruth, ImageAnnotation, ImageSample, Proposal, ScoreMatrix,
};
