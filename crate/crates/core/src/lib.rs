//! Sketch-based image retrieval with per-sample dynamic weighting of a
//! quadruplet ranking loss.
//!
//! The crate is organised bottom-up: [`tensor`] holds the reverse-mode
//! autodiff engine, [`encoders`] the transformer encoders and text features,
//! [`weighting`] the alignment scores and per-sample weights, [`loss`] the
//! weighted quadruplet objective and [`retrieval`] ranking and evaluation.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
