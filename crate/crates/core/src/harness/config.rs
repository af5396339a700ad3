//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Defaults for regularisation and the
//! learning-rate schedule depend on `model`, which is therefore resolved
//! before the other keys.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ge2e::SpeakerEncoderConfig;
use crate::numcore::LrSchedule;
use crate::synthesizer::SynthConfig;

/// Comma-separated list of non-negative integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsizeList(pub Vec<usize>);

impl FromStr for UsizeList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<_, _>>()
            .map(Self)
    }
}

impl fmt::Display for UsizeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Synthesizer variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Lsa,
    Dca,
    Proposed,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lsa, ModelKind::Dca, ModelKind::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lsa => "lsa",
            ModelKind::Dca => "dca",
            ModelKind::Proposed => "proposed",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lsa" => Ok(ModelKind::Lsa),
            "dca" => Ok(ModelKind::Dca),
            "proposed" => Ok(ModelKind::Proposed),
            other => Err(format!("unknown model {other:?} (expected lsa, dca or proposed)")),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Learning-rate schedule shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Exponential,
    Step,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "exponential" => Ok(ScheduleKind::Exponential),
            "step" => Ok(ScheduleKind::Step),
            other => Err(format!("unknown schedule {other:?}")),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Step => "step",
        })
    }
}

macro_rules! experiment_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of data generation, training and evaluation.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl ExperimentConfig {
            /// Keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn base() -> Self {
                Self { $($name: $default,)* }
            }

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Resolved configuration in canonical key order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($name), self.$name));)*
                out
            }
        }
    };
}

experiment_config! {
    seed: u64 = 0;
    model: ModelKind = ModelKind::Proposed;

    /// Symbols in the synthetic alphabet.
    alphabet: usize = 8;
    frames_per_symbol: usize = 4;
    mel_channels: usize = 16;
    reduction_factor: usize = 2;
    /// Standard deviation of additive Gaussian noise on target frames.
    noise: f64 = 0.05;
    /// Symbol 0 renders as a speaker-independent pause.
    pause_symbol: bool = true;
    speakers: usize = 4;
    /// Training utterances per speaker.
    utterances: usize = 64;
    min_len: usize = 3;
    max_len: usize = 20;

    embedding_dim: usize = 32;
    encoder_channels: usize = 32;
    encoder_lstm: usize = 16;
    prenet_dim: usize = 32;
    decoder_dim: usize = 64;
    attention_dim: usize = 32;
    zoneout1: f64 = 0.1;
    zoneout2: f64 = 0.1;
    prenet_dropout: f64 = 0.5;
    encoder_dropout: f64 = 0.1;
    dynamic_dropout: f64 = 0.0;

    steps: usize = 3000;
    batch_size: usize = 8;
    lr: f64 = 1e-3;
    lr_schedule: ScheduleKind = ScheduleKind::Exponential;
    lr_final: f64 = 1e-5;
    lr_decay_start: usize = 2250;
    lr_decay_end: usize = 3000;
    lr_milestones: UsizeList = UsizeList(Vec::new());
    lr_factor: f64 = 0.5;
    clip: f64 = 1.0;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_eps: f64 = 1e-6;
    weight_decay: f64 = 1e-6;
    log_every: usize = 50;
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    checkpoint_every: usize = 0;

    /// Speakers available to encoder training.
    ge2e_pool: usize = 32;
    /// Unseen speakers used for encoder evaluation.
    ge2e_heldout: usize = 8;
    /// Speakers per GE2E batch.
    ge2e_speakers: usize = 8;
    /// Utterances per speaker in a GE2E batch and in evaluation.
    ge2e_utterances: usize = 10;
    /// Training window length in frames.
    ge2e_window: usize = 24;
    ge2e_hidden: usize = 32;
    ge2e_layers: usize = 2;
    ge2e_dim: usize = 16;
    ge2e_steps: usize = 600;
    ge2e_lr: f64 = 1e-2;
    ge2e_lr_halve_at: usize = 400;
    ge2e_clip: f64 = 3.0;
    ge2e_overlap: f64 = 0.5;

    sweep_lengths: UsizeList = UsizeList(vec![5, 10, 20, 50, 100, 200]);
    /// Utterances per speaker and length in the sweep.
    sweep_utterances: usize = 2;
    /// Decoder step budget as a multiple of the ground-truth step count.
    max_steps_factor: f64 = 2.0;
    stop_threshold: f64 = 0.5;
    /// Keeps pre-net dropout active during free-running synthesis.
    inference_prenet_dropout: bool = false;
}

impl ExperimentConfig {
    /// Defaults for `model` with schedule points compressed onto `steps`.
    pub fn for_model(model: ModelKind) -> Self {
        let mut c = Self::base();
        c.model = model;
        c.apply_model_defaults();
        c
    }

    fn apply_model_defaults(&mut self) {
        let s = self.steps;
        // Decay is confined to the last quarter of training.
        let decay = s * 3 / 4;
        match self.model {
            ModelKind::Lsa | ModelKind::Dca => {
                self.lr_schedule = ScheduleKind::Exponential;
                self.lr_decay_start = decay;
                self.lr_decay_end = s;
                self.zoneout1 = 0.1;
                self.zoneout2 = 0.1;
                self.dynamic_dropout = 0.0;
            }
            ModelKind::Proposed => {
                self.lr_schedule = ScheduleKind::Step;
                self.lr_milestones = UsizeList(
                    [10, 20, 40, 60, 100, 150, 200, 250]
                        .iter()
                        .map(|m| decay + m * (s - decay) / 300)
                        .collect(),
                );
                self.zoneout1 = 0.1;
                self.zoneout2 = 0.15;
                self.dynamic_dropout = 0.1;
            }
        }
        self.ge2e_lr_halve_at = self.ge2e_steps * 2 / 3;
    }

    /// Parses a document. `model` and the step counts are applied first so
    /// that dependent defaults follow them; explicit keys always win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !Self::KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            pairs.push((k, v));
        }
        let mut c = Self::base();
        for first in ["model", "steps", "ge2e_steps"] {
            if let Some((k, v)) = pairs.iter().find(|(k, _)| k == first) {
                c.set(k, v)?;
            }
        }
        c.apply_model_defaults();
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut c = self.clone();
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("alphabet", self.alphabet),
            ("frames_per_symbol", self.frames_per_symbol),
            ("mel_channels", self.mel_channels),
            ("reduction_factor", self.reduction_factor),
            ("speakers", self.speakers),
            ("utterances", self.utterances),
            ("min_len", self.min_len),
            ("batch_size", self.batch_size),
            ("ge2e_window", self.ge2e_window),
            ("ge2e_heldout", self.ge2e_heldout),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !self.frames_per_symbol.is_multiple_of(self.reduction_factor) {
            return bad(format!(
                "frames_per_symbol {} must be a multiple of reduction_factor {}",
                self.frames_per_symbol, self.reduction_factor
            ));
        }
        if self.min_len > self.max_len {
            return bad(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len));
        }
        if !(self.clip > 0.0) || !(self.ge2e_clip > 0.0) {
            return bad("gradient clipping thresholds must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.ge2e_lr >= 0.0) || !(self.lr_final >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.lr_schedule == ScheduleKind::Exponential && self.lr_decay_end < self.lr_decay_start {
            return bad("lr_decay_end precedes lr_decay_start".into());
        }
        if self.ge2e_utterances < 2 {
            return bad("ge2e_utterances must be at least 2".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        if !(self.max_steps_factor >= 1.0) {
            return bad("max_steps_factor must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ge2e_overlap) {
            return bad("ge2e_overlap must lie in [0, 1)".into());
        }
        if self.ge2e_speakers > self.ge2e_pool || self.ge2e_speakers < 2 {
            return bad("ge2e_speakers must be at least 2 and at most ge2e_pool".into());
        }
        self.synth_config()?.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.lr_schedule {
            ScheduleKind::Constant => LrSchedule::Constant(self.lr),
            ScheduleKind::Exponential => LrSchedule::Exponential {
                initial: self.lr,
                final_lr: self.lr_final,
                start: self.lr_decay_start,
                end: self.lr_decay_end,
            },
            ScheduleKind::Step => LrSchedule::Step {
                initial: self.lr,
                factor: self.lr_factor,
                milestones: self.lr_milestones.0.clone(),
            },
        }
    }

    pub fn ge2e_schedule(&self) -> LrSchedule {
        LrSchedule::Step {
            initial: self.ge2e_lr,
            factor: 0.5,
            milestones: vec![self.ge2e_lr_halve_at],
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let mut c = SynthConfig::preset(self.model.as_str(), self.alphabet)?;
        c.embedding_dim = self.embedding_dim;
        c.encoder_channels = self.encoder_channels;
        c.encoder_lstm = self.encoder_lstm;
        c.speaker_dim = self.ge2e_dim;
        c.speaker_projection_dim = self.ge2e_dim;
        c.prenet_dims = [self.prenet_dim; 2];
        c.decoder_lstm = [self.decoder_dim; 2];
        c.mel_channels = self.mel_channels;
        c.reduction_factor = self.reduction_factor;
        c.attention.attention_dim = self.attention_dim;
        c.attention.dynamic_dropout = self.dynamic_dropout;
        c.zoneout = [self.zoneout1, self.zoneout2];
        c.prenet_dropout = self.prenet_dropout;
        c.encoder_dropout = self.encoder_dropout;
        Ok(c)
    }

    pub fn encoder_config(&self) -> SpeakerEncoderConfig {
        SpeakerEncoderConfig {
            n_mels: self.mel_channels,
            hidden: self.ge2e_hidden,
            layers: self.ge2e_layers,
            embedding_dim: self.ge2e_dim,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_model(ModelKind::Proposed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        for m in ModelKind::ALL {
            let c = ExperimentConfig::for_model(m);
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn model_drives_defaults_and_explicit_keys_win() {
        let c = ExperimentConfig::parse("model = proposed\nsteps = 300\n").unwrap();
        assert_eq!((c.zoneout2, c.dynamic_dropout, c.lr_schedule), (0.15, 0.1, ScheduleKind::Step));
        assert_eq!(c.lr_milestones.0, vec![227, 230, 235, 240, 250, 262, 275, 287]);
        let c = ExperimentConfig::parse("zoneout2 = 0.5\nmodel = lsa\n# comment\n\nsteps = 600").unwrap();
        assert_eq!((c.zoneout2, c.lr_decay_start, c.lr_decay_end), (0.5, 450, 600));
    }

    #[test]
    fn rejects_bad_documents() {
        for doc in [
            "colour = red",
            "seed = 1\nseed = 2",
            "clip = 0",
            "model = tts",
            "steps = many",
            "just a line",
            "frames_per_symbol = 3",
            "min_len = 9\nmax_len = 4",
            "ge2e_utterances = 1",
        ] {
            assert!(matches!(ExperimentConfig::parse(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn lists_parse_and_print() {
        let l: UsizeList = "1, 2,30".parse().unwrap();
        assert_eq!(l.to_string(), "1,2,30");
        assert_eq!("".parse::<UsizeList>().unwrap().0, Vec::<usize>::new());
        assert!("1,x".parse::<UsizeList>().is_err());
    }
}
