//! Answer selection with attentive multi-size convolutional sentence
//! encoders, built on a small reverse-mode autodiff tape.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
