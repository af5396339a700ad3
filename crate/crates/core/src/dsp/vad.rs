use crate::dsp::mel::frame_count;
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// Frames whose RMS is at or below this are silent regardless of level.
pub const ABSOLUTE_FLOOR_RMS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Silence threshold relative to the 95th-percentile frame level.
    pub threshold_db: f64,
    /// Interior silent runs shorter than this are relabelled as speech.
    pub hangover_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: -40.0,
            hangover_frames: 5,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-frame silence mask (`true` = silent).
pub fn vad(audio: &AudioBuffer, cfg: &VadConfig) -> Result<Vec<bool>> {
    let sr = audio.sample_rate as f64;
    let win = (cfg.frame_ms * sr / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * sr / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Config("VAD framing must be positive".into()));
    }
    let n = frame_count(audio.samples.len(), win, hop);
    if n == 0 {
        return Err(Error::Audio(format!(
            "{} samples is shorter than one {win}-sample VAD frame",
            audio.samples.len()
        )));
    }
    let rms: Vec<f64> = (0..n)
        .map(|t| {
            let f = &audio.samples[t * hop..t * hop + win];
            (f.iter().map(|x| x * x).sum::<f64>() / win as f64).sqrt()
        })
        .collect();
    let mut sorted = rms.clone();
    sorted.sort_by(f64::total_cmp);
    let reference = percentile(&sorted, 0.95);
    let cutoff = reference * 10f64.powf(cfg.threshold_db / 20.0);
    let mut silent: Vec<bool> = rms
        .iter()
        .map(|&r| r <= ABSOLUTE_FLOOR_RMS || r < cutoff)
        .collect();
    apply_hangover(&mut silent, cfg.hangover_frames);
    Ok(silent)
}

/// Relabels silent runs shorter than `hangover` that have speech on both
/// sides.
pub fn apply_hangover(silent: &mut [bool], hangover: usize) {
    let n = silent.len();
    let mut t = 0;
    while t < n {
        if !silent[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && silent[t] {
            t += 1;
        }
        if start > 0 && t < n && t - start < hangover {
            silent[start..t].iter_mut().for_each(|s| *s = false);
        }
    }
}
