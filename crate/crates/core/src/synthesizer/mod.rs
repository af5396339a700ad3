//! Multi-speaker sequence-to-sequence mel synthesizer with pluggable
//! attention.
//!
//! The encoder embeds symbols, applies a convolution stack and a
//! bidirectional LSTM, and appends a speaker block to every key. Each decoder
//! step consumes the previous frame through a pre-net, runs two LSTMs,
//! attends over the keys and emits `r` mel frames and a stop logit. A
//! residual convolutional post-net refines the whole mel afterwards.

mod config;

pub use config::SynthConfig;

use std::sync::Arc;

use rand::Rng;

use crate::attention::{init_alignment_masked, AlignmentState, Attention, PreparedKeys};
use crate::error::{Error, Result};
use crate::numcore::params::glorot;
use crate::numcore::{
    bce_with_logits, dropout, zoneout, Bindings, Linear, LstmCell, LstmState, ParamId, ParamStore, SeededRng, Tape,
    Tensor, Var,
};

/// Default stop probability threshold.
pub const STOP_THRESHOLD: f64 = 0.5;

/// Which stochastic regularisers are active.
pub enum Noise<'a> {
    Off,
    /// Every regulariser, as during training.
    Train(&'a mut SeededRng),
    /// Pre-net dropout only, for free-running synthesis.
    PrenetOnly(&'a mut SeededRng),
}

impl Noise<'_> {
    fn train(&mut self) -> Option<&mut SeededRng> {
        match self {
            Noise::Train(r) => Some(r),
            _ => None,
        }
    }

    fn prenet(&mut self) -> Option<&mut SeededRng> {
        match self {
            Noise::Train(r) | Noise::PrenetOnly(r) => Some(r),
            Noise::Off => None,
        }
    }
}

/// Same-padded convolution layer over time `[T, Cin] -> [T, Cout]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(rng, cout, cin * kernel));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, kernel }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        tape.conv1d_multi(x, p.var(self.w), p.var(self.b), self.kernel)
    }
}

/// Encoder keys `[L, key_dim]` and their validity mask.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub keys: Var,
    pub mask: Arc<[bool]>,
}

/// Recurrent state carried between decoder steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub lstm: [LstmState; 2],
    pub alignment: AlignmentState,
    /// `c_{i−1}`, key width.
    pub prev_context: Var,
    /// `y_{i−1}`, one mel frame.
    pub prev_frame: Var,
}

/// What the next step consumes as its previous frame.
#[derive(Clone, Copy, Debug)]
pub enum Feed<'a> {
    Teacher(&'a [f64]),
    Free,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[r · mel_channels]`, frame-major.
    pub frames: Var,
    /// `[1]`.
    pub stop_logit: Var,
    pub alignment: Var,
    pub context: Var,
    /// Context fed to the frame projection.
    pub projection_context: Var,
    pub state: DecoderState,
}

/// Tape handles of a full decode.
#[derive(Clone, Debug)]
pub struct SynthVars {
    /// `[steps · r, mel]`.
    pub mel_before: Var,
    pub mel_after: Var,
    /// `[steps]`.
    pub stop_logits: Var,
    pub alignments: Vec<Var>,
}

/// Values of a decode.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    pub stop_logits: Vec<f64>,
    /// `[steps, L]`.
    pub alignment: Tensor,
    /// Decoding hit `max_steps` without a stop decision.
    pub truncated: bool,
}

impl SynthOutput {
    fn from_vars(tape: &Tape, v: &SynthVars, truncated: bool) -> Result<Self> {
        let rows: Vec<Vec<f64>> = v.alignments.iter().map(|&a| tape.data(a).to_vec()).collect();
        Ok(Self {
            mel_before: tape.value(v.mel_before).clone(),
            mel_after: tape.value(v.mel_after).clone(),
            stop_logits: tape.data(v.stop_logits).to_vec(),
            alignment: Tensor::from_rows(&rows)?,
            truncated,
        })
    }

    pub fn steps(&self) -> usize {
        self.stop_logits.len()
    }
}

/// Targets padded to a multiple of `r` with frame and step masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[steps · r, mel]`; padded rows are zero.
    pub mel: Tensor,
    pub frame_mask: Vec<bool>,
    /// 1 on the step holding the last real frame, 0 before it.
    pub stop: Vec<f64>,
    pub step_mask: Vec<bool>,
}

impl Targets {
    pub fn new(mel: &Tensor, r: usize) -> Result<Self> {
        if mel.ndim() != 2 || mel.rows() == 0 {
            return Err(Error::invalid(format!("target mel must be non-empty [T, mel], got {:?}", mel.shape())));
        }
        mel.ensure_finite("target mel")?;
        let t = mel.rows();
        let steps = t.div_ceil(r);
        let mut data = mel.data().to_vec();
        data.resize(steps * r * mel.cols(), 0.0);
        let mut stop = vec![0.0; steps];
        stop[steps - 1] = 1.0;
        Ok(Self {
            mel: Tensor::new(vec![steps * r, mel.cols()], data)?,
            frame_mask: (0..steps * r).map(|i| i < t).collect(),
            stop,
            step_mask: vec![true; steps],
        })
    }

    /// Appends `extra` fully masked decoder steps.
    pub fn with_masked_padding(mut self, extra: usize, r: usize) -> Result<Self> {
        let mel = self.mel.cols();
        let mut data = self.mel.into_data();
        data.resize(data.len() + extra * r * mel, 0.0);
        let rows = data.len() / mel;
        self.mel = Tensor::new(vec![rows, mel], data)?;
        self.frame_mask.extend(std::iter::repeat_n(false, extra * r));
        self.stop.extend(std::iter::repeat_n(0.0, extra));
        self.step_mask.extend(std::iter::repeat_n(false, extra));
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.stop.len()
    }

    pub fn valid_frames(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }
}

/// Free-running decode controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisOptions {
    pub max_steps: usize,
    pub stop_threshold: f64,
    /// Seed for pre-net dropout during synthesis; `None` disables it.
    pub prenet_seed: Option<u64>,
}

impl SynthesisOptions {
    pub fn new(max_steps: usize) -> Self {
        Self {
            max_steps,
            stop_threshold: STOP_THRESHOLD,
            prenet_seed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub config: SynthConfig,
    pub embedding: ParamId,
    pub encoder_convs: Vec<ConvLayer>,
    pub encoder_fwd: LstmCell,
    pub encoder_bwd: LstmCell,
    pub speaker_projection: Option<Linear>,
    pub prenet: [Linear; 2],
    pub decoder: [LstmCell; 2],
    pub attention: Attention,
    pub frame_projection: Linear,
    pub stop_projection: Linear,
    pub postnet: Vec<ConvLayer>,
}

impl Synthesizer {
    pub fn new(store: &mut ParamStore, config: SynthConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embedding = store.add(
            "synth.embedding",
            Tensor::new(
                vec![c.n_symbols, c.embedding_dim],
                (0..c.n_symbols * c.embedding_dim).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            )?,
        );
        let encoder_convs = (0..c.encoder_conv_layers)
            .map(|i| {
                let cin = if i == 0 { c.embedding_dim } else { c.encoder_channels };
                ConvLayer::new(store, &format!("synth.enc_conv{i}"), cin, c.encoder_channels, c.encoder_kernel, rng)
            })
            .collect::<Vec<_>>();
        let enc_in = if c.encoder_conv_layers == 0 { c.embedding_dim } else { c.encoder_channels };
        let encoder_fwd = LstmCell::new(store, "synth.enc_fwd", enc_in, c.encoder_lstm, rng);
        let encoder_bwd = LstmCell::new(store, "synth.enc_bwd", enc_in, c.encoder_lstm, rng);
        let speaker_projection = c
            .mod_speaker_projection
            .then(|| Linear::new(store, "synth.spk_proj", c.speaker_dim, c.speaker_projection_dim, true, rng));
        let key = c.key_dim();
        let prenet = [
            Linear::new(store, "synth.prenet0", c.mel_channels, c.prenet_dims[0], true, rng),
            Linear::new(store, "synth.prenet1", c.prenet_dims[0], c.prenet_dims[1], true, rng),
        ];
        let lstm2_in = c.decoder_lstm[0] + if c.mod_skip_context { key } else { 0 };
        let decoder = [
            LstmCell::new(store, "synth.dec0", c.prenet_dims[1] + key, c.decoder_lstm[0], rng),
            LstmCell::new(store, "synth.dec1", lstm2_in, c.decoder_lstm[1], rng),
        ];
        let attention = Attention::new(store, "synth.attn", &c.attention, c.decoder_lstm[1], key, rng)?;
        let proj_in = c.decoder_lstm[1] + key;
        let frame_projection = Linear::new(store, "synth.frame_proj", proj_in, c.mel_channels * c.reduction_factor, true, rng);
        let stop_projection = Linear::new(store, "synth.stop_proj", proj_in, 1, true, rng);
        let postnet = (0..c.postnet_layers)
            .map(|i| {
                let cin = if i == 0 { c.mel_channels } else { c.postnet_channels };
                let cout = if i + 1 == c.postnet_layers { c.mel_channels } else { c.postnet_channels };
                ConvLayer::new(store, &format!("synth.postnet{i}"), cin, cout, c.postnet_kernel, rng)
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            encoder_convs,
            encoder_fwd,
            encoder_bwd,
            speaker_projection,
            prenet,
            decoder,
            attention,
            frame_projection,
            stop_projection,
            postnet,
        })
    }

    fn check_inputs(&self, symbols: &[usize], d_vector: &[f64]) -> Result<()> {
        if symbols.is_empty() {
            return Err(Error::invalid("symbol sequence is empty"));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= self.config.n_symbols) {
            return Err(Error::invalid(format!("unknown symbol id {s} (alphabet {})", self.config.n_symbols)));
        }
        if d_vector.len() != self.config.speaker_dim {
            return Err(Error::shape(
                "encode",
                format!("d-vector of {} values, expected {}", d_vector.len(), self.config.speaker_dim),
            ));
        }
        let norm = d_vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("d-vector norm {norm} is not 1")));
        }
        Ok(())
    }

    fn run_lstm(&self, tape: &mut Tape, p: &Bindings, cell: &LstmCell, rows: &[Var]) -> Result<Vec<Var>> {
        let mut st = LstmState::zeros(tape, cell.hidden);
        let mut out = Vec::with_capacity(rows.len());
        for &x in rows {
            st = cell.step(tape, p, x, st)?;
            out.push(st.h);
        }
        Ok(out)
    }

    /// Keys for `symbols` spoken by the speaker with unit d-vector `d_vector`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        symbols: &[usize],
        d_vector: &[f64],
        noise: &mut Noise,
    ) -> Result<EncoderOutputs> {
        self.check_inputs(symbols, d_vector)?;
        let l = symbols.len();
        let mut x = tape.gather(p.var(self.embedding), symbols)?;
        for conv in &self.encoder_convs {
            x = conv.forward(tape, p, x)?;
            x = tape.relu(x)?;
            x = dropout(tape, x, self.config.encoder_dropout, noise.train())?;
        }
        let rows = (0..l).map(|t| tape.row(x, t)).collect::<Result<Vec<_>>>()?;
        let fwd = self.run_lstm(tape, p, &self.encoder_fwd, &rows)?;
        let rev: Vec<Var> = rows.iter().rev().copied().collect();
        let mut bwd = self.run_lstm(tape, p, &self.encoder_bwd, &rev)?;
        bwd.reverse();
        let fwd = tape.stack_rows(&fwd)?;
        let bwd = tape.stack_rows(&bwd)?;
        let h = tape.concat_cols(fwd, bwd)?;
        let d = tape.constant(Tensor::vector(d_vector.to_vec()));
        let spk = match &self.speaker_projection {
            Some(proj) => proj.forward(tape, p, d)?,
            None => d,
        };
        let spk = tape.broadcast_rows(spk, l)?;
        let keys = tape.concat_cols(h, spk)?;
        Ok(EncoderOutputs {
            keys,
            mask: vec![true; l].into(),
        })
    }

    pub fn initial_state(&self, tape: &mut Tape, enc: &EncoderOutputs) -> Result<DecoderState> {
        Ok(DecoderState {
            lstm: [
                LstmState::zeros(tape, self.config.decoder_lstm[0]),
                LstmState::zeros(tape, self.config.decoder_lstm[1]),
            ],
            alignment: init_alignment_masked(tape, enc.mask.clone())?,
            prev_context: tape.constant(Tensor::zeros(&[self.config.key_dim()])),
            prev_frame: tape.constant(Tensor::zeros(&[self.config.mel_channels])),
        })
    }

    fn zoneout_state(
        tape: &mut Tape,
        prev: LstmState,
        new: LstmState,
        p: f64,
        noise: &mut Noise,
    ) -> Result<LstmState> {
        let h = zoneout(tape, prev.h, new.h, p, noise.train())?;
        let c = zoneout(tape, prev.c, new.c, p, noise.train())?;
        Ok(LstmState { h, c })
    }

    /// One decoder step.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        keys: &PreparedKeys,
        state: &DecoderState,
        feed: Feed,
        noise: &mut Noise,
    ) -> Result<StepOutput> {
        let c = &self.config;
        if let Feed::Teacher(f) = feed {
            if f.len() != c.mel_channels {
                return Err(Error::shape("decode_step", format!("teacher frame of {} values", f.len())));
            }
        }
        let mut x = state.prev_frame;
        for layer in &self.prenet {
            x = layer.forward(tape, p, x)?;
            x = tape.relu(x)?;
            x = dropout(tape, x, c.prenet_dropout, noise.prenet())?;
        }
        let in1 = tape.concat(&[x, state.prev_context])?;
        let s1 = self.decoder[0].step(tape, p, in1, state.lstm[0])?;
        let s1 = Self::zoneout_state(tape, state.lstm[0], s1, c.zoneout[0], noise)?;
        let in2 = if c.mod_skip_context {
            tape.concat(&[s1.h, state.prev_context])?
        } else {
            s1.h
        };
        let s2 = self.decoder[1].step(tape, p, in2, state.lstm[1])?;
        let s2 = Self::zoneout_state(tape, state.lstm[1], s2, c.zoneout[1], noise)?;
        let d = s2.h;
        let att = self.attention.step(tape, p, d, keys, &state.alignment, noise.train())?;
        let projection_context = if c.mod_prev_context {
            state.prev_context
        } else {
            att.context
        };
        let proj_in = tape.concat(&[d, projection_context])?;
        let frames = self.frame_projection.forward(tape, p, proj_in)?;
        let stop_in = tape.concat(&[d, att.context])?;
        let stop_logit = self.stop_projection.forward(tape, p, stop_in)?;
        let prev_frame = match feed {
            Feed::Teacher(f) => tape.constant(Tensor::vector(f.to_vec())),
            Feed::Free => tape.slice(frames, (c.reduction_factor - 1) * c.mel_channels, c.mel_channels)?,
        };
        Ok(StepOutput {
            frames,
            stop_logit,
            alignment: att.alignment,
            context: att.context,
            projection_context,
            state: DecoderState {
                lstm: [s1, s2],
                alignment: att.state,
                prev_context: att.context,
                prev_frame,
            },
        })
    }

    /// Residual post-net over `[T, mel]`.
    pub fn postnet(&self, tape: &mut Tape, p: &Bindings, mel: Var, noise: &mut Noise) -> Result<Var> {
        let mut x = mel;
        for (i, conv) in self.postnet.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            if i + 1 < self.postnet.len() {
                x = tape.tanh(x)?;
                x = dropout(tape, x, self.config.encoder_dropout, noise.train())?;
            }
        }
        tape.add(mel, x)
    }

    fn assemble(&self, tape: &mut Tape, p: &Bindings, steps: &[StepOutput], noise: &mut Noise) -> Result<SynthVars> {
        let frames: Vec<Var> = steps.iter().map(|s| s.frames).collect();
        let stacked = tape.stack_rows(&frames)?;
        let mel_before = tape.reshape(stacked, &[steps.len() * self.config.reduction_factor, self.config.mel_channels])?;
        let mel_after = self.postnet(tape, p, mel_before, noise)?;
        let stops: Vec<Var> = steps.iter().map(|s| s.stop_logit).collect();
        let stop_logits = tape.concat(&stops)?;
        Ok(SynthVars {
            mel_before,
            mel_after,
            stop_logits,
            alignments: steps.iter().map(|s| s.alignment).collect(),
        })
    }

    /// Decodes with the target frames fed back, one step per `r` frames.
    pub fn teacher_forced_vars(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        symbols: &[usize],
        d_vector: &[f64],
        targets: &Targets,
        noise: &mut Noise,
    ) -> Result<SynthVars> {
        let enc = self.encode(tape, p, symbols, d_vector, noise)?;
        let keys = self.attention.prepare(tape, p, enc.keys)?;
        let mut state = self.initial_state(tape, &enc)?;
        let r = self.config.reduction_factor;
        let mut steps = Vec::with_capacity(targets.steps());
        for i in 0..targets.steps() {
            let out = self.decode_step(tape, p, &keys, &state, Feed::Teacher(targets.mel.row(i * r + r - 1)), noise)?;
            state = out.state.clone();
            steps.push(out);
        }
        self.assemble(tape, p, &steps, noise)
    }

    /// Teacher-forced loss on the tape and the decoded values.
    pub fn teacher_forced_forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        symbols: &[usize],
        d_vector: &[f64],
        targets: &Targets,
        noise: &mut Noise,
    ) -> Result<(Var, SynthOutput)> {
        let vars = self.teacher_forced_vars(tape, p, symbols, d_vector, targets, noise)?;
        let loss = synth_loss(tape, &vars, targets)?;
        Ok((loss, SynthOutput::from_vars(tape, &vars, false)?))
    }

    /// Free-running decode from a zero frame until the stop probability
    /// exceeds the threshold or `max_steps` is reached.
    pub fn synthesize(
        &self,
        store: &ParamStore,
        symbols: &[usize],
        d_vector: &[f64],
        opts: &SynthesisOptions,
    ) -> Result<SynthOutput> {
        if opts.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let mut rng = opts.prenet_seed.map(crate::numcore::seeded_rng);
        let mut noise = match rng.as_mut() {
            Some(r) => Noise::PrenetOnly(r),
            None => Noise::Off,
        };
        let enc = self.encode(&mut tape, &p, symbols, d_vector, &mut noise)?;
        let keys = self.attention.prepare(&mut tape, &p, enc.keys)?;
        let mut state = self.initial_state(&mut tape, &enc)?;
        let mut steps = Vec::new();
        let mut truncated = true;
        for _ in 0..opts.max_steps {
            let out = self.decode_step(&mut tape, &p, &keys, &state, Feed::Free, &mut noise)?;
            state = out.state.clone();
            let stop = tape.data(out.stop_logit)[0];
            steps.push(out);
            if sigmoid(stop) > opts.stop_threshold {
                truncated = false;
                break;
            }
        }
        let vars = self.assemble(&mut tape, &p, &steps, &mut noise)?;
        SynthOutput::from_vars(&tape, &vars, truncated)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn masked_mean(tape: &mut Tape, x: Var, mask: &Tensor, count: f64) -> Result<Var> {
    let m = tape.constant(mask.clone());
    let xm = tape.mul(x, m)?;
    let s = tape.sum(xm)?;
    tape.scale(s, 1.0 / count)
}

/// Masked mean L1 plus mean L2 on both mel outputs, plus mean stop BCE.
pub fn synth_loss(tape: &mut Tape, vars: &SynthVars, targets: &Targets) -> Result<Var> {
    let pred = tape.value(vars.mel_before).shape().to_vec();
    if pred != targets.mel.shape() || tape.value(vars.stop_logits).len() != targets.steps() {
        return Err(Error::shape(
            "synth_loss",
            format!("prediction {pred:?} vs target {:?}", targets.mel.shape()),
        ));
    }
    let mel = targets.mel.cols();
    let mask: Vec<f64> = targets
        .frame_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, mel))
        .collect();
    let mask = Tensor::new(pred, mask)?;
    let count = (targets.valid_frames() * mel) as f64;
    if count == 0.0 {
        return Err(Error::invalid("targets have no valid frames"));
    }
    let target = tape.constant(targets.mel.clone());
    let mut terms = Vec::with_capacity(5);
    for out in [vars.mel_before, vars.mel_after] {
        let diff = tape.sub(out, target)?;
        let l1 = tape.abs(diff)?;
        terms.push(masked_mean(tape, l1, &mask, count)?);
        let l2 = tape.square(diff)?;
        terms.push(masked_mean(tape, l2, &mask, count)?);
    }
    let weights: Vec<f64> = targets.step_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    terms.push(bce_with_logits(tape, vars.stop_logits, &targets.stop, &weights)?);
    let all = tape.concat(&terms)?;
    tape.sum(all)
}

#[cfg(test)]
mod tests;
