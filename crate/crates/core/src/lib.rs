//! Desk-scale laboratory for memorization in diffusion models.
//!
//! The pipeline runs dataset generation, score modelling (the closed-form
//! kernel optimum or a trained MLP), sampling, memorization scoring and
//! effective-model-memorization estimation.

pub mod config;
pub mod dataset;
pub mod emm;
pub mod error;
pub mod harness;
pub mod kernel_score;
pub mod memorization;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score_net;
pub mod trainer;

pub use error::{Error, Result};
