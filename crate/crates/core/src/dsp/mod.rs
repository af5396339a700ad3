//! Audio features and companding: mel spectrograms, MFCCs, μ-law, energy VAD
//! and WAV I/O.

mod mel;
mod mfcc;
pub mod mulaw;
mod vad;
mod wav;

pub use mel::{
    frame_count, hz_to_mel, mel_filterbank, mel_points, mel_to_hz, melspectrogram, stft_magnitude, MelConfig,
    MelSpectrogram, LOG_FLOOR,
};
pub use mfcc::{dct_basis, mfcc};
pub use mulaw::{mulaw_decode, mulaw_encode};
pub use vad::{apply_hangover, vad, VadConfig, ABSOLUTE_FLOOR_RMS};
pub use wav::{read_wav, resample_linear, write_wav, TARGET_RATE};

use crate::error::{Error, Result};

/// Mono samples in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if let Some(s) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::Audio(format!("sample {s} outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[cfg(test)]
mod tests;
