//! Zero-shot token labeling from sentence-level supervision.
//!
//! A BiLSTM sentence classifier with logistic soft attention is trained on
//! sentence labels; its unnormalized attention weights then serve as token
//! labels. Gradient-magnitude, relative-frequency and supervised labelers
//! are provided for comparison, along with the evaluation metrics.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod labelers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
