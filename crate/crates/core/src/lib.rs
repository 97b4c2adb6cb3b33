//! Multi-stream motion representation, autoencoder, contrastive recognizer,
//! masked autoregressive flow-matching generator and recognizer-gradient
//! guidance, on a synthetic motion-caption corpus.

pub mod autoencoder;
pub mod config;
pub mod dataset;
pub mod evalmetrics;
pub mod generator;
pub mod guidance;
mod error;
pub mod layers;
pub mod motion_repr;
pub mod pipeline;
pub mod recognizer;

pub use error::{Error, Result};
