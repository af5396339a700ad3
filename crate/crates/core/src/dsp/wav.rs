use std::path::Path;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;

/// Reads 16-bit PCM mono WAV and resamples to 16 kHz.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio(format!(
            "{}: only 16-bit PCM mono is supported (got {} ch, {} bit, {:?})",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(AudioBuffer {
        samples: resample_linear(&samples, spec.sample_rate, TARGET_RATE),
        sample_rate: TARGET_RATE,
    })
}

/// Writes 16-bit PCM mono, clamping to full scale.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &audio.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(err)?;
    }
    w.finalize().map_err(err)
}

/// Linear interpolation between neighbouring input samples at output times
/// `n · from/to`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let n_out = ((samples.len() as f64) / ratio).floor().max(1.0) as usize;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = samples[lo.min(samples.len() - 1)];
            let b = samples[(lo + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}
