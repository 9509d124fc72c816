//! Command-line pipeline and HTTP inference service for the IR-drop
//! surrogate.

pub mod cli;
pub mod inference;
pub mod service;

pub use inference::{predict, Model, PredictResponse, Prediction};
