//! Waveform proxy for synthetic log-mel frames.
//!
//! Each mel channel drives a sinusoid at its band centre with amplitude
//! `exp(value)`, held constant over the frame hop. Channels at or below the
//! log floor contribute nothing, and frames with every channel at the floor
//! render as exact zeros. Other samples are normalised by the channel count,
//! clamped to `[-1, 1]` and μ-law quantised.

use std::f64::consts::PI;

use crate::dsp::mulaw::{mulaw_decode, mulaw_encode, DEFAULT_LEVELS};
use crate::dsp::{hz_to_mel, mel_to_hz, AudioBuffer, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const RENDER_RATE: u32 = 16_000;
/// Band centres span this range in Hz.
pub const RENDER_BAND: (f64, f64) = (80.0, 7600.0);

/// Centre frequency of each of `n` mel-spaced channels.
pub fn band_centres(n: usize) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(RENDER_BAND.0), hz_to_mel(RENDER_BAND.1));
    (0..n)
        .map(|c| mel_to_hz(lo + (hi - lo) * (c + 1) as f64 / (n + 1) as f64))
        .collect()
}

/// Renders `[T, mel]` log-mel frames at `hop_ms` per frame.
pub fn render_waveform(mel: &Tensor, hop_ms: f64) -> Result<AudioBuffer> {
    if mel.ndim() != 2 || mel.rows() == 0 || mel.cols() == 0 {
        return Err(Error::invalid(format!("cannot render mel of shape {:?}", mel.shape())));
    }
    mel.ensure_finite("rendered mel")?;
    let hop = (RENDER_RATE as f64 * hop_ms / 1000.0).round() as usize;
    if hop == 0 {
        return Err(Error::invalid(format!("hop {hop_ms} ms is below one sample")));
    }
    let centres = band_centres(mel.cols());
    let floor = LOG_FLOOR.ln();
    let norm = mel.cols() as f64;
    let mut samples = Vec::with_capacity(mel.rows() * hop);
    for t in 0..mel.rows() {
        let amps: Vec<f64> = mel.row(t).iter().map(|&v| if v <= floor { 0.0 } else { v.exp() }).collect();
        if amps.iter().all(|&a| a == 0.0) {
            samples.extend(std::iter::repeat_n(0.0, hop));
            continue;
        }
        for k in 0..hop {
            let n = (t * hop + k) as f64 / RENDER_RATE as f64;
            let x: f64 = amps.iter().zip(&centres).map(|(a, f)| a * (2.0 * PI * f * n).sin()).sum();
            let x = (x / norm).clamp(-1.0, 1.0);
            samples.push(mulaw_decode(mulaw_encode(x, DEFAULT_LEVELS)?, DEFAULT_LEVELS)?);
        }
    }
    AudioBuffer::new(samples, RENDER_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::silence_rate;

    #[test]
    fn length_and_rate_follow_the_hop() {
        let mel = Tensor::filled(&[7, 4], -1.0);
        let a = render_waveform(&mel, 12.5).unwrap();
        assert_eq!(a.sample_rate, RENDER_RATE);
        assert_eq!(a.samples.len(), 7 * 200);
    }

    #[test]
    fn floor_frames_render_silent_and_loud_frames_do_not() {
        let mut rows = vec![vec![-1.0; 8]; 40];
        rows.extend(vec![vec![-30.0; 8]; 40]);
        let mel = Tensor::from_rows(&rows).unwrap();
        let audio = render_waveform(&mel, 12.5).unwrap();
        let silent_tail = &audio.samples[40 * 200..];
        assert!(silent_tail.iter().all(|&s| s == 0.0));
        let rate = silence_rate(&audio).unwrap();
        assert!((0.4..0.6).contains(&rate), "{rate}");
        let loud = render_waveform(&Tensor::filled(&[80, 8], -1.0), 12.5).unwrap();
        assert_eq!(silence_rate(&loud).unwrap(), 0.0);
    }

    #[test]
    fn samples_stay_in_range() {
        let mel = Tensor::filled(&[5, 16], 3.0);
        let a = render_waveform(&mel, 12.5).unwrap();
        assert!(a.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        let quantised: Vec<f64> = (0..DEFAULT_LEVELS).map(|c| mulaw_decode(c, DEFAULT_LEVELS).unwrap()).collect();
        assert!(a.samples.iter().all(|s| quantised.contains(s)));
    }

    #[test]
    fn band_centres_increase_inside_band() {
        let c = band_centres(16);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c[0] > RENDER_BAND.0 && c[15] < RENDER_BAND.1);
    }
}
