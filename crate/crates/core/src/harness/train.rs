//! Seeded training loops for the synthesizer and the speaker encoder.
//!
//! Per-example gradients may be computed in parallel, but they are always
//! summed in example order, so a fixed seed and config give a bit-identical
//! trajectory.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::ge2e::{utterance_embedding, SpeakerEncoderNet};
use crate::metrics::{cosine_similarity, eer, ScoreSet};
use crate::numcore::{clip_global_norm, seeded_rng, Adam, ParamStore, Tape, Tensor};
use crate::synthesizer::{Noise, Synthesizer, Targets};

use super::checkpoint::{Checkpoint, ModuleKind};
use super::config::ExperimentConfig;
use super::task::{sub_seed, Dataset, SyntheticTask};

/// Frame length and hop assigned to synthetic mel frames.
pub const SYNTH_FRAME_MS: f64 = 50.0;
pub const SYNTH_HOP_MS: f64 = 12.5;

/// One optimizer step of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,loss,grad_norm,lr";

/// Writes a training log as CSV.
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.grad_norm, r.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parameters after training plus the per-step log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            step,
            detail: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Clips, checks and applies a summed gradient; returns the pre-clip norm.
fn apply_update(
    step: usize,
    loss: f64,
    grads: &mut [Tensor],
    clip: f64,
    lr: f64,
    adam: &mut Adam,
    store: &mut ParamStore,
) -> Result<f64> {
    let norm = clip_global_norm(grads, clip);
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss {loss}, gradient norm {norm}"),
        });
    }
    adam.step(store, grads, lr)?;
    Ok(norm)
}

fn adam_for(cfg: &ExperimentConfig, store: &ParamStore, eps: f64) -> Adam {
    Adam::new(store, cfg.adam_beta1, cfg.adam_beta2, eps, cfg.weight_decay)
}

/// Freshly initialised synthesizer for `cfg`.
pub fn build_synthesizer(cfg: &ExperimentConfig) -> Result<(Synthesizer, ParamStore)> {
    let mut store = ParamStore::new();
    let synth = Synthesizer::new(&mut store, cfg.synth_config()?, &mut seeded_rng(sub_seed(cfg.seed, "synth-init")))?;
    Ok((synth, store))
}

/// Freshly initialised speaker encoder for `cfg`.
pub fn build_encoder(cfg: &ExperimentConfig) -> Result<(SpeakerEncoderNet, ParamStore)> {
    let mut store = ParamStore::new();
    let net = SpeakerEncoderNet::new(&mut store, cfg.encoder_config(), &mut seeded_rng(sub_seed(cfg.seed, "encoder-init")))?;
    Ok((net, store))
}

/// Synthesizer, parameters, config and d-vectors restored from a checkpoint.
pub fn load_synthesizer(ck: &Checkpoint) -> Result<(Synthesizer, ParamStore, ExperimentConfig, Vec<Vec<f64>>)> {
    ck.expect_kind(ModuleKind::Synth)?;
    let cfg = ck.experiment_config()?;
    let (synth, mut store) = build_synthesizer(&cfg)?;
    ck.restore_into(&mut store)?;
    let dvectors = ck
        .dvectors()
        .ok_or_else(|| Error::Checkpoint("synth checkpoint carries no conditioning d-vectors".into()))?;
    Ok((synth, store, cfg, dvectors))
}

/// Speaker encoder, parameters and config restored from a checkpoint.
pub fn load_encoder(ck: &Checkpoint) -> Result<(SpeakerEncoderNet, ParamStore, ExperimentConfig)> {
    ck.expect_kind(ModuleKind::Encoder)?;
    let cfg = ck.experiment_config()?;
    let (net, mut store) = build_encoder(&cfg)?;
    ck.restore_into(&mut store)?;
    Ok((net, store, cfg))
}

/// Seeded unit vectors standing in for speaker embeddings.
pub fn random_dvectors(n_speakers: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n_speakers)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Enrollment d-vector per speaker: the normalised mean of its utterance
/// embeddings in `dataset`.
pub fn enrolled_dvectors(
    cfg: &ExperimentConfig,
    net: &SpeakerEncoderNet,
    store: &ParamStore,
    dataset: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    (0..dataset.task.n_speakers())
        .map(|spk| {
            let embs = dataset
                .utterances
                .iter()
                .filter(|u| u.speaker == spk)
                .map(|u| embed_utterance(cfg, net, store, &u.mel_tensor()?))
                .collect::<Result<Vec<_>>>()?;
            if embs.is_empty() {
                return Err(Error::invalid(format!("speaker {spk} has no utterances to enroll")));
            }
            crate::ge2e::aggregate_dvectors(&embs)
        })
        .collect()
}

/// Sliding-window utterance embedding of a synthetic mel.
pub fn embed_utterance(cfg: &ExperimentConfig, net: &SpeakerEncoderNet, store: &ParamStore, mel: &Tensor) -> Result<Vec<f64>> {
    let mel = MelSpectrogram::new(mel.clone(), SYNTH_FRAME_MS, SYNTH_HOP_MS)?;
    let window_s = cfg.ge2e_window as f64 * SYNTH_HOP_MS / 1000.0;
    utterance_embedding(&mel, net, store, window_s, cfg.ge2e_overlap)
}

/// Teacher-forced loss and parameter gradients of one utterance.
pub fn synth_example_gradients(
    synth: &Synthesizer,
    store: &ParamStore,
    symbols: &[usize],
    d_vector: &[f64],
    mel: &Tensor,
    noise_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let targets = Targets::new(mel, synth.config.reduction_factor)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let mut rng = seeded_rng(noise_seed);
    let (loss, _) = synth.teacher_forced_forward(&mut tape, &p, symbols, d_vector, &targets, &mut Noise::Train(&mut rng))?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), p.vars().iter().map(|&v| g.tensor(&tape, v)).collect()))
}

/// Trains the synthesizer. `on_checkpoint` receives intermediate and final
/// checkpoints.
pub fn train_synth(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    dvectors: &[Vec<f64>],
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.utterances.is_empty() {
        return Err(Error::invalid("dataset has no utterances"));
    }
    if dvectors.len() < dataset.task.n_speakers() || dvectors.iter().any(|d| d.len() != cfg.ge2e_dim) {
        return Err(Error::invalid(format!(
            "need {} d-vectors of width {}",
            dataset.task.n_speakers(),
            cfg.ge2e_dim
        )));
    }
    if dataset.task.mel_channels != cfg.mel_channels || dataset.task.alphabet != cfg.alphabet {
        return Err(Error::Config("dataset alphabet or mel_channels differ from the config".into()));
    }
    let (synth, mut store) = build_synthesizer(cfg)?;
    let mels: Vec<Tensor> = dataset.utterances.iter().map(|u| u.mel_tensor()).collect::<Result<_>>()?;
    let mut adam = adam_for(cfg, &store, cfg.adam_eps);
    let schedule = cfg.schedule();
    let mut batch_rng = seeded_rng(sub_seed(cfg.seed, "synth-batches"));
    let noise_base = sub_seed(cfg.seed, "synth-noise");
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..mels.len())).collect();
        let results: Vec<(f64, Vec<Tensor>)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let u = &dataset.utterances[i];
                let seed = noise_base ^ ((step as u64) << 16 | k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                synth_example_gradients(&synth, &store, &u.symbols, &dvectors[u.speaker], &mels[i], seed)
            })
            .collect::<Result<_>>()
            .map_err(|e| diverged(step, e))?;
        let (loss, mut grads) = mean_of(results);
        let lr = schedule.at(step);
        let grad_norm = apply_update(step, loss, &mut grads, cfg.clip, lr, &mut adam, &mut store)?;
        log.push(LogRow { step, loss, grad_norm, lr });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("synth step {step} loss {loss:.5} |g| {grad_norm:.4} lr {lr:.3e}");
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            on_checkpoint(&Checkpoint::new(ModuleKind::Synth, (step + 1) as u64, cfg, &store).with_dvectors(dvectors)?)?;
        }
    }
    on_checkpoint(&Checkpoint::new(ModuleKind::Synth, cfg.steps as u64, cfg, &store).with_dvectors(dvectors)?)?;
    Ok(TrainOutcome { params: store, log })
}

/// Averages per-example losses and gradients in example order.
fn mean_of(results: Vec<(f64, Vec<Tensor>)>) -> (f64, Vec<Tensor>) {
    let n = results.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi.data());
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    (loss / n, grads)
}

/// Training and held-out speakers for the encoder, sharing the synthesizer
/// task's templates.
pub fn encoder_task(cfg: &ExperimentConfig) -> Result<SyntheticTask> {
    let base = SyntheticTask::from_config(cfg)?;
    Ok(base.with_new_speakers(cfg.ge2e_pool + cfg.ge2e_heldout, sub_seed(cfg.seed, "ge2e-speakers")))
}

/// Random window of `cfg.ge2e_window` frames from a fresh utterance.
fn sample_window(cfg: &ExperimentConfig, task: &SyntheticTask, speaker: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let len = cfg.ge2e_window.div_ceil(task.frames_per_symbol) + 1;
    let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.alphabet)).collect();
    let mel = task.render(&symbols, speaker, rng)?;
    let start = rng.gen_range(0..=mel.rows() - cfg.ge2e_window);
    let c = mel.cols();
    Tensor::new(vec![cfg.ge2e_window, c], mel.data()[start * c..(start + cfg.ge2e_window) * c].to_vec())
}

/// Trains the speaker encoder with the GE2E loss on the first `ge2e_pool`
/// speakers of [`encoder_task`].
pub fn train_encoder(
    cfg: &ExperimentConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = encoder_task(cfg)?;
    let (net, mut store) = build_encoder(cfg)?;
    let mut adam = adam_for(cfg, &store, 1e-8);
    let schedule = cfg.ge2e_schedule();
    let mut rng = seeded_rng(sub_seed(cfg.seed, "ge2e-batches"));
    let (n, m) = (cfg.ge2e_speakers, cfg.ge2e_utterances);
    let mut log = Vec::with_capacity(cfg.ge2e_steps);
    for step in 0..cfg.ge2e_steps {
        let speakers = sample(&mut rng, cfg.ge2e_pool, n).into_vec();
        let mut windows = Vec::with_capacity(n * m);
        for &spk in &speakers {
            for _ in 0..m {
                windows.push(sample_window(cfg, &task, spk, &mut rng)?);
            }
        }
        let (loss, mut grads) = net.loss_and_gradients(&store, &windows, n, m).map_err(|e| diverged(step, e))?;
        let lr = schedule.at(step);
        let grad_norm = apply_update(step, loss, &mut grads, cfg.ge2e_clip, lr, &mut adam, &mut store)?;
        net.clamp_scale(&mut store);
        log.push(LogRow { step, loss, grad_norm, lr });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("encoder step {step} loss {loss:.5} |g| {grad_norm:.4} lr {lr:.3e}");
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.ge2e_steps {
            on_checkpoint(&Checkpoint::new(ModuleKind::Encoder, (step + 1) as u64, cfg, &store))?;
        }
    }
    on_checkpoint(&Checkpoint::new(ModuleKind::Encoder, cfg.ge2e_steps as u64, cfg, &store))?;
    Ok(TrainOutcome { params: store, log })
}

/// Speaker separation of an encoder on held-out speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderEval {
    pub mean_intra: f64,
    pub mean_inter: f64,
    pub eer: f64,
    pub scores: ScoreSet,
}

/// Embeds `ge2e_utterances` fresh utterances for each held-out speaker and
/// scores every unordered pair by cosine similarity.
pub fn evaluate_encoder(cfg: &ExperimentConfig, net: &SpeakerEncoderNet, store: &ParamStore) -> Result<EncoderEval> {
    let task = encoder_task(cfg)?;
    let mut rng = seeded_rng(sub_seed(cfg.seed, "ge2e-eval"));
    let len = 2 * cfg.ge2e_window.div_ceil(task.frames_per_symbol);
    let mut items = Vec::new();
    for spk in cfg.ge2e_pool..cfg.ge2e_pool + cfg.ge2e_heldout {
        for _ in 0..cfg.ge2e_utterances {
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.alphabet)).collect();
            items.push((spk, task.render(&symbols, spk, &mut rng)?));
        }
    }
    let embs: Vec<Vec<f64>> = items
        .par_iter()
        .map(|(_, mel)| embed_utterance(cfg, net, store, mel))
        .collect::<Result<_>>()?;
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let s = cosine_similarity(&embs[i], &embs[j])?;
            if items[i].0 == items[j].0 {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_intra, mean_inter) = (mean(&genuine), mean(&impostor));
    let scores = ScoreSet::new(genuine, impostor)?;
    Ok(EncoderEval {
        mean_intra,
        mean_inter,
        eer: eer(&scores)?,
        scores,
    })
}
