//! Synthetic multispeaker corpus with exact ground-truth alignments.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{seeded_rng, Tensor};

use super::config::ExperimentConfig;

/// Per-speaker affine map `frame · gain + bias`, channel-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTransform {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SpeakerTransform {
    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }

    fn apply(&self, frame: &[f64], out: &mut Vec<f64>) {
        out.extend(frame.iter().zip(&self.gain).zip(&self.bias).map(|((x, g), b)| x * g + b));
    }
}

/// Symbols rendered as fixed frame templates under per-speaker transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub alphabet: usize,
    pub frames_per_symbol: usize,
    pub mel_channels: usize,
    pub reduction_factor: usize,
    /// `templates[s]` is `frames_per_symbol × mel_channels`, row-major.
    pub templates: Vec<Vec<f64>>,
    pub speakers: Vec<SpeakerTransform>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Symbol 0 is a pause: a constant [`PAUSE_LEVEL`] template that no
    /// speaker transform alters.
    pub pause: bool,
}

/// Template values are drawn from this log-mel range.
pub const TEMPLATE_RANGE: (f64, f64) = (-4.0, 0.0);
pub const GAIN_RANGE: (f64, f64) = (0.8, 1.25);
pub const BIAS_RANGE: (f64, f64) = (-0.5, 0.5);
/// Log-mel level of pause frames; renders more than 40 dB below speech.
pub const PAUSE_LEVEL: f64 = -8.0;

impl SyntheticTask {
    /// Random templates and speaker transforms.
    pub fn generate(
        alphabet: usize,
        frames_per_symbol: usize,
        mel_channels: usize,
        reduction_factor: usize,
        n_speakers: usize,
        noise: f64,
        pause: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let per = frames_per_symbol * mel_channels;
        let templates = (0..alphabet)
            .map(|s| {
                if pause && s == 0 {
                    vec![PAUSE_LEVEL; per]
                } else {
                    (0..per).map(|_| rng.gen_range(TEMPLATE_RANGE.0..TEMPLATE_RANGE.1)).collect()
                }
            })
            .collect();
        let task = Self {
            alphabet,
            frames_per_symbol,
            mel_channels,
            reduction_factor,
            templates,
            speakers: Vec::new(),
            noise,
            pause,
        };
        task.validate()?;
        Ok(task.with_new_speakers(n_speakers, rng.gen()))
    }

    /// Task for the synthesizer experiment.
    pub fn from_config(c: &ExperimentConfig) -> Result<Self> {
        Self::generate(
            c.alphabet,
            c.frames_per_symbol,
            c.mel_channels,
            c.reduction_factor,
            c.speakers,
            c.noise,
            c.pause_symbol,
            sub_seed(c.seed, "task"),
        )
    }

    /// Same templates with `n` freshly drawn speakers.
    pub fn with_new_speakers(&self, n: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let c = self.mel_channels;
        let speakers = (0..n)
            .map(|_| SpeakerTransform {
                gain: (0..c).map(|_| rng.gen_range(GAIN_RANGE.0..GAIN_RANGE.1)).collect(),
                bias: (0..c).map(|_| rng.gen_range(BIAS_RANGE.0..BIAS_RANGE.1)).collect(),
            })
            .collect();
        Self {
            speakers,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet == 0 || self.frames_per_symbol == 0 || self.mel_channels == 0 || self.reduction_factor == 0 {
            return Err(Error::invalid("task sizes must be positive"));
        }
        if !self.frames_per_symbol.is_multiple_of(self.reduction_factor) {
            return Err(Error::invalid(format!(
                "frames_per_symbol {} is not a multiple of r = {}",
                self.frames_per_symbol, self.reduction_factor
            )));
        }
        let per = self.frames_per_symbol * self.mel_channels;
        if self.templates.len() != self.alphabet || self.templates.iter().any(|t| t.len() != per) {
            return Err(Error::Format("template table does not match the task sizes".into()));
        }
        if self
            .speakers
            .iter()
            .any(|s| s.gain.len() != self.mel_channels || s.bias.len() != self.mel_channels)
        {
            return Err(Error::Format("speaker transform width differs from mel_channels".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn steps_per_symbol(&self) -> usize {
        self.frames_per_symbol / self.reduction_factor
    }

    fn check(&self, symbols: &[usize], speaker: usize) -> Result<()> {
        if symbols.is_empty() {
            return Err(Error::invalid("symbol sequence is empty"));
        }
        if let Some(s) = symbols.iter().find(|&&s| s >= self.alphabet) {
            return Err(Error::invalid(format!("symbol {s} outside alphabet of {}", self.alphabet)));
        }
        if speaker >= self.speakers.len() {
            return Err(Error::invalid(format!("speaker {speaker} of {}", self.speakers.len())));
        }
        Ok(())
    }

    /// Appends frames `frames` of symbol `s` as spoken by `speaker`.
    fn speak(&self, s: usize, speaker: usize, frames: std::ops::Range<usize>, out: &mut Vec<f64>) {
        let c = self.mel_channels;
        let t = &self.templates[s][frames.start * c..frames.end * c];
        if self.is_pause(s) {
            out.extend_from_slice(t);
        } else {
            for frame in t.chunks(c) {
                self.speakers[speaker].apply(frame, out);
            }
        }
    }

    pub fn is_pause(&self, symbol: usize) -> bool {
        self.pause && symbol == 0
    }

    /// Noise-free target `[L · frames_per_symbol, mel]`.
    pub fn clean_mel(&self, symbols: &[usize], speaker: usize) -> Result<Tensor> {
        self.check(symbols, speaker)?;
        let mut data = Vec::with_capacity(symbols.len() * self.frames_per_symbol * self.mel_channels);
        for &s in symbols {
            self.speak(s, speaker, 0..self.frames_per_symbol, &mut data);
        }
        Tensor::new(vec![symbols.len() * self.frames_per_symbol, self.mel_channels], data)
    }

    /// Target with the task's noise drawn from `rng`.
    pub fn render(&self, symbols: &[usize], speaker: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let clean = self.clean_mel(symbols, speaker)?;
        if self.noise == 0.0 {
            return Ok(clean);
        }
        let normal = Normal::new(0.0, self.noise).map_err(|e| Error::invalid(e.to_string()))?;
        let shape = clean.shape().to_vec();
        let mut data = clean.into_data();
        for x in &mut data {
            *x += normal.sample(rng);
        }
        Tensor::new(shape, data)
    }

    /// Symbol index attended at each decoder step.
    pub fn alignment_path(&self, n_symbols: usize) -> Vec<usize> {
        (0..n_symbols * self.steps_per_symbol())
            .map(|i| i * self.reduction_factor / self.frames_per_symbol)
            .collect()
    }

    /// One-hot ground-truth alignment `[steps, L]`.
    pub fn alignment_matrix(&self, n_symbols: usize) -> Result<Tensor> {
        let path = self.alignment_path(n_symbols);
        let mut data = vec![0.0; path.len() * n_symbols];
        for (i, &j) in path.iter().enumerate() {
            data[i * n_symbols + j] = 1.0;
        }
        Tensor::new(vec![path.len(), n_symbols], data)
    }

    /// Nearest-template decoding of a mel sequence produced for `speaker`.
    ///
    /// Each complete decoder-step chunk of `r` frames is matched against
    /// every (symbol, phase) chunk of the speaker's templates. A symbol is
    /// emitted on phase 0, or when the matched symbol changes mid-symbol.
    /// Pause phases are indistinguishable, so a run of `k` pause steps
    /// emits `max(1, round(k / steps_per_symbol))` pauses.
    pub fn decode(&self, mel: &Tensor, speaker: usize) -> Result<Vec<usize>> {
        if mel.ndim() != 2 || mel.cols() != self.mel_channels {
            return Err(Error::shape(
                "decode",
                format!("mel {:?} vs {} channels", mel.shape(), self.mel_channels),
            ));
        }
        if speaker >= self.speakers.len() {
            return Err(Error::invalid(format!("speaker {speaker} of {}", self.speakers.len())));
        }
        let r = self.reduction_factor;
        let chunk = r * self.mel_channels;
        let phases = self.steps_per_symbol();
        let mut candidates: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(self.alphabet * phases);
        for s in 0..self.alphabet {
            let n_ph = if self.is_pause(s) { 1 } else { phases };
            for ph in 0..n_ph {
                let mut c = Vec::with_capacity(chunk);
                self.speak(s, speaker, ph * r..(ph + 1) * r, &mut c);
                candidates.push((s, ph, c));
            }
        }
        let mut out = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pause_run = 0usize;
        let flush = |run: &mut usize, out: &mut Vec<usize>| {
            if *run > 0 {
                let n = ((*run as f64 / phases as f64).round() as usize).max(1);
                out.extend(std::iter::repeat_n(0, n));
                *run = 0;
            }
        };
        for step in mel.data().chunks_exact(chunk) {
            let mut best = (f64::INFINITY, 0, 0);
            for (s, ph, c) in &candidates {
                let d: f64 = step.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, *s, *ph);
                }
            }
            let (_, s, ph) = best;
            if self.is_pause(s) {
                pause_run += 1;
            } else {
                flush(&mut pause_run, &mut out);
                if ph == 0 || prev != Some(s) {
                    out.push(s);
                }
            }
            prev = Some(s);
        }
        flush(&mut pause_run, &mut out);
        Ok(out)
    }
}

/// Stable sub-seed for an independent random stream.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub symbols: Vec<usize>,
    /// `[T, mel]` rows.
    pub mel: Vec<Vec<f64>>,
    /// Symbol attended at each decoder step.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn mel_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.mel)
    }
}

/// A task together with utterances drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: SyntheticTask,
    pub utterances: Vec<Utterance>,
}

/// Draws `n_utts` utterances per speaker with lengths uniform in `length_range`.
pub fn gen_dataset(
    task: &SyntheticTask,
    n_utts: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    let (lo, hi) = length_range;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("length range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
    }
    task.validate()?;
    let mut rng = seeded_rng(seed);
    let mut utterances = Vec::with_capacity(task.n_speakers() * n_utts);
    for speaker in 0..task.n_speakers() {
        for k in 0..n_utts {
            let len = rng.gen_range(lo..=hi);
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.alphabet)).collect();
            let mel = task.render(&symbols, speaker, &mut rng)?;
            utterances.push(Utterance {
                id: format!("s{speaker:02}_u{k:04}"),
                speaker,
                alignment: task.alignment_path(len),
                mel: (0..mel.rows()).map(|t| mel.row(t).to_vec()).collect(),
                symbols,
            });
        }
    }
    Ok(Dataset {
        task: task.clone(),
        utterances,
    })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        d.task.validate()?;
        for u in &d.utterances {
            if u.speaker >= d.task.n_speakers() || u.mel.iter().any(|r| r.len() != d.task.mel_channels) {
                return Err(Error::Format(format!("utterance {} does not match its task", u.id)));
            }
        }
        Ok(d)
    }

    pub fn max_len(&self) -> usize {
        self.utterances.iter().map(|u| u.symbols.len()).max().unwrap_or(0)
    }
}
