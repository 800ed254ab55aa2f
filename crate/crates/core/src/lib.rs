//! Speaker verification with Double Multi-Head Attention pooling.
//!
//! The pipeline runs from 16 kHz audio to log-mel features, a VGG-style
//! convolutional encoder, one of three attention poolings (self attention,
//! self multi-head attention, double multi-head attention), a four-layer
//! classifier head trained with additive-margin softmax, and finally
//! cosine scoring with EER / minimum DCF metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradsuite;
pub mod head;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
