use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-magnitude mel spectrogram, `frames [T, n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor, frame_ms: f64, hop_ms: f64) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::shape("mel_spectrogram", format!("expected [T, n_mels], got {:?}", frames.shape())));
        }
        frames.ensure_finite("mel spectrogram")?;
        Ok(Self {
            frames,
            frame_ms,
            hop_ms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to Nyquist when `None`.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    /// Synthesizer targets: 50 ms frames, 12.5 ms hop, 80 bands at 16 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_ms: 50.0,
            hop_ms: 12.5,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl MelConfig {
    /// Speaker-encoder features: 25 ms frames, 10 ms hop.
    pub fn encoder(n_mels: usize) -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels,
            ..Self::default()
        }
    }

    pub fn win_length(&self) -> usize {
        (self.frame_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.win_length().next_power_of_two()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `1 + floor((len − win)/hop)`, or 0 when the signal is shorter than a window.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Band edge frequencies: `n_mels + 2` points equally spaced in mel.
pub fn mel_points(cfg: &MelConfig) -> Vec<f64> {
    let fmax = cfg.fmax.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters `[n_mels][n_fft/2 + 1]` over linear FFT-bin frequency.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.n_fft();
    let bins = n_fft / 2 + 1;
    let pts = mel_points(cfg);
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * cfg.sample_rate as f64 / n_fft as f64;
                    if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Framed magnitude spectra, `[T][n_fft/2 + 1]`.
pub fn stft_magnitude(samples: &[f64], win: usize, hop: usize, n_fft: usize) -> Vec<Vec<f64>> {
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let window = hann(win);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..frame_count(samples.len(), win, hop))
        .map(|t| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (s, w)) in samples[t * hop..t * hop + win].iter().zip(&window).enumerate() {
                buf[i].re = s * w;
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

/// Hann-windowed magnitude STFT, triangular HTK mel filterbank, natural log
/// with a [`LOG_FLOOR`] floor.
pub fn melspectrogram(audio: &AudioBuffer, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Audio(format!(
            "audio at {} Hz, mel config expects {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let (win, hop) = (cfg.win_length(), cfg.hop_length());
    if win == 0 || hop == 0 || cfg.n_mels == 0 {
        return Err(Error::Config("mel framing must be positive".into()));
    }
    if audio.samples.len() < win {
        return Err(Error::Audio(format!(
            "{} samples is shorter than one {win}-sample window",
            audio.samples.len()
        )));
    }
    let bank = mel_filterbank(cfg);
    let spectra = stft_magnitude(&audio.samples, win, hop, cfg.n_fft());
    let mut data = Vec::with_capacity(spectra.len() * cfg.n_mels);
    for spec in &spectra {
        for filt in &bank {
            let e: f64 = filt.iter().zip(spec).map(|(w, s)| w * s).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    MelSpectrogram::new(Tensor::new(vec![spectra.len(), cfg.n_mels], data)?, cfg.frame_ms, cfg.hop_ms)
}
