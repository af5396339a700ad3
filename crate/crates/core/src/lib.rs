//! Energy-based attention for long-form sequence-to-sequence speech
//! synthesis, speaker embeddings, signal processing and evaluation metrics.

pub mod attention;
pub mod dsp;
pub mod error;
pub mod ge2e;
pub mod harness;
pub mod metrics;
pub mod numcore;
pub mod synthesizer;

pub use error::{Error, Result};
