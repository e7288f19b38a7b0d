//! Semantic-rectified feature generation for zero-shot learning.
//!
//! The pipeline pre-trains a semantic rectifying network ([`srn`]) so that
//! class attribute vectors mirror the cosine geometry of visual class means,
//! then trains a conditional Wasserstein generator with two reconstruction
//! cycles ([`srgan`], [`trainer`]), synthesises visual features for classes
//! never seen in training and scores ZSL / GZSL accuracy ([`eval`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod mds;
pub mod ndgrad;
pub mod srgan;
pub mod srn;
pub mod trainer;

pub use error::{Error, Result};
pub use ndgrad::{Graph, MlpParams, Tensor};
