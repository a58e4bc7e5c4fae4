//! Calcium-imaging cell-type classification: 1D-CNN, RNN and LSTM classifiers with
//! hand-written backpropagation, a synthetic fluorescence simulator, evaluation
//! metrics and boosting baselines.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod format;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod network;
pub mod recurrent;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
