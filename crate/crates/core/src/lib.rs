//! Latent world models on frozen visual patch features, with zero-shot
//! goal reaching by trajectory optimization in latent space.
//!
//! The pipeline: a frozen patch encoder turns RGB observations into grids of
//! feature vectors; a frame-causal transformer learns to predict the next
//! frame's features from a short history of features and actions; planning
//! then searches action sequences (CEM, gradient descent, or receding-horizon
//! MPC) that drive the predicted features toward an encoded goal image. An
//! optional transposed-convolution decoder maps features back to pixels for
//! inspection and image metrics.

pub mod data;
pub mod decoder;
pub mod encoders;
pub mod envs;
pub mod error;
pub mod eval;
pub mod math;
pub mod planner;
pub mod predictor;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};
