//! Generalised end-to-end speaker-verification loss and the recurrent
//! speaker encoder that produces d-vectors.
//!
//! Rows of an `[N·M, D]` embedding matrix are ordered speaker-major: row
//! `n·M + m` is utterance `m` of speaker `n`.

use rand::Rng;
use rayon::prelude::*;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numcore::{Bindings, Linear, LstmCell, LstmState, ParamId, ParamStore, Tape, Tensor, Var};

/// Denominator guard for cosine similarity.
pub const COS_EPS: f64 = 1e-12;
/// Lower bound for the similarity scale after every update.
pub const MIN_SCALE: f64 = 1e-6;

/// `N × M` unit-norm embeddings stored as `[N·M, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    n_speakers: usize,
    n_utterances: usize,
    embeddings: Tensor,
}

impl EmbeddingBatch {
    pub fn new(n_speakers: usize, n_utterances: usize, embeddings: Tensor) -> Result<Self> {
        if embeddings.ndim() != 2 || embeddings.rows() != n_speakers * n_utterances || n_speakers == 0 {
            return Err(Error::shape(
                "embedding_batch",
                format!("{n_speakers}x{n_utterances} batch with embeddings {:?}", embeddings.shape()),
            ));
        }
        for r in 0..embeddings.rows() {
            let norm = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("embedding row {r} has norm {norm}")));
            }
        }
        Ok(Self {
            n_speakers,
            n_utterances,
            embeddings,
        })
    }

    /// L2-normalises each row first.
    pub fn from_raw(n_speakers: usize, n_utterances: usize, raw: &Tensor) -> Result<Self> {
        let mut t = Tape::new();
        let v = t.constant(raw.clone());
        let e = t.l2_normalize(v, COS_EPS)?;
        Self::new(n_speakers, n_utterances, t.value(e).clone())
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn n_utterances(&self) -> usize {
        self.n_utterances
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn get(&self, speaker: usize, utterance: usize) -> &[f64] {
        self.embeddings.row(speaker * self.n_utterances + utterance)
    }
}

/// Similarity scale `ω` and bias `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GE2EScale {
    pub w: f64,
    pub b: f64,
}

impl Default for GE2EScale {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

/// Speaker centroids `[N, D]` and leave-one-out centroids `[N·M, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub full: Tensor,
    pub exclusive: Tensor,
}

fn averaging_matrix(n: usize, m: usize) -> Tensor {
    let mut a = vec![0.0; n * n * m];
    for k in 0..n {
        for i in 0..m {
            a[k * n * m + k * m + i] = 1.0 / m as f64;
        }
    }
    Tensor::new(vec![n, n * m], a).expect("sized above")
}

fn leave_one_out_matrix(n: usize, m: usize) -> Tensor {
    let nm = n * m;
    let mut a = vec![0.0; nm * nm];
    for k in 0..n {
        for row in 0..m {
            for col in (0..m).filter(|&c| c != row) {
                a[(k * m + row) * nm + k * m + col] = 1.0 / (m - 1) as f64;
            }
        }
    }
    Tensor::new(vec![nm, nm], a).expect("sized above")
}

fn own_columns(n: usize, m: usize) -> Vec<usize> {
    (0..n * m).map(|r| r / m).collect()
}

fn need_two(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid(
            "leave-one-out centroid is undefined with one utterance per speaker",
        ));
    }
    Ok(())
}

/// Centroids of an embedding matrix recorded on `tape`.
pub fn centroids_on_tape(tape: &mut Tape, e: Var, n: usize, m: usize) -> Result<(Var, Var)> {
    need_two(m)?;
    let a = tape.constant(averaging_matrix(n, m));
    let full = tape.matmul(a, e)?;
    let b = tape.constant(leave_one_out_matrix(n, m));
    let excl = tape.matmul(b, e)?;
    Ok((full, excl))
}

pub fn centroids(batch: &EmbeddingBatch) -> Result<Centroids> {
    let mut t = Tape::new();
    let e = t.constant(batch.embeddings.clone());
    let (full, excl) = centroids_on_tape(&mut t, e, batch.n_speakers, batch.n_utterances)?;
    Ok(Centroids {
        full: t.value(full).clone(),
        exclusive: t.value(excl).clone(),
    })
}

/// `S [N·M, N]` for unit-norm rows `e`, with `w` and `b` of shape `[1]`.
pub fn similarity_on_tape(tape: &mut Tape, e: Var, w: Var, b: Var, n: usize, m: usize) -> Result<Var> {
    let rows = n * m;
    if tape.value(e).rows() != rows {
        return Err(Error::shape("similarity_matrix", format!("{:?} for {n}x{m}", tape.value(e).shape())));
    }
    let (full, excl) = centroids_on_tape(tape, e, n, m)?;
    let full = tape.l2_normalize(full, COS_EPS)?;
    let excl = tape.l2_normalize(excl, COS_EPS)?;
    let cos_all = tape.matmul_t(e, full)?;
    let cos_own = tape.row_dot(e, excl)?;
    let own = own_columns(n, m);
    let stale = tape.pick_cols(cos_all, &own)?;
    let stale = tape.place_cols(stale, &own, n)?;
    let fresh = tape.place_cols(cos_own, &own, n)?;
    let cos = tape.sub(cos_all, stale)?;
    let cos = tape.add(cos, fresh)?;
    let flat = tape.reshape(cos, &[rows * n, 1])?;
    let scaled = tape.matmul(flat, w)?;
    let ones = tape.constant(Tensor::filled(&[rows * n, 1], 1.0));
    let bias = tape.matmul(ones, b)?;
    let s = tape.add(scaled, bias)?;
    tape.reshape(s, &[rows, n])
}

pub fn similarity_matrix(batch: &EmbeddingBatch, scale: GE2EScale) -> Result<Tensor> {
    let mut t = Tape::new();
    let e = t.constant(batch.embeddings.clone());
    let w = t.constant(Tensor::vector(vec![scale.w]));
    let b = t.constant(Tensor::vector(vec![scale.b]));
    let s = similarity_on_tape(&mut t, e, w, b, batch.n_speakers, batch.n_utterances)?;
    Ok(t.value(s).clone())
}

/// `Σ_{n,m} [−S_{nm,n} + log Σ_k exp S_{nm,k}]`.
pub fn ge2e_loss_on_tape(tape: &mut Tape, s: Var, n: usize, m: usize) -> Result<Var> {
    let own = own_columns(n, m);
    let lse = tape.row_logsumexp(s)?;
    let pos = tape.pick_cols(s, &own)?;
    let per = tape.sub(lse, pos)?;
    tape.sum(per)
}

pub fn ge2e_loss(s: &Tensor, n: usize, m: usize) -> Result<f64> {
    if s.shape() != [n * m, n] {
        return Err(Error::shape("ge2e_loss", format!("{:?} for {n}x{m}", s.shape())));
    }
    s.ensure_finite("similarity matrix")?;
    let mut t = Tape::new();
    let v = t.constant(s.clone());
    let l = ge2e_loss_on_tape(&mut t, v, n, m)?;
    Ok(t.scalar(l))
}

/// Loss on raw (unnormalised) encoder outputs `[N·M, D]`.
pub fn ge2e_loss_from_raw(tape: &mut Tape, raw: Var, w: Var, b: Var, n: usize, m: usize) -> Result<Var> {
    let e = tape.l2_normalize(raw, COS_EPS)?;
    let s = similarity_on_tape(tape, e, w, b, n, m)?;
    ge2e_loss_on_tape(tape, s, n, m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoderConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embedding_dim: usize,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 16,
            hidden: 32,
            layers: 2,
            embedding_dim: 16,
        }
    }
}

impl SpeakerEncoderConfig {
    /// Full-scale reference sizes.
    pub fn full_scale(n_mels: usize) -> Self {
        Self {
            n_mels,
            hidden: 768,
            layers: 3,
            embedding_dim: 256,
        }
    }
}

/// Stacked LSTMs over mel frames, final hidden state projected linearly.
#[derive(Clone, Debug)]
pub struct SpeakerEncoderNet {
    pub config: SpeakerEncoderConfig,
    pub layers: Vec<LstmCell>,
    pub projection: Linear,
    pub scale_w: ParamId,
    pub scale_b: ParamId,
}

impl SpeakerEncoderNet {
    pub fn new(store: &mut ParamStore, config: SpeakerEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.embedding_dim == 0 || config.n_mels == 0 {
            return Err(Error::Config("speaker encoder sizes must be positive".into()));
        }
        let layers = (0..config.layers)
            .map(|i| {
                let input = if i == 0 { config.n_mels } else { config.hidden };
                LstmCell::new(store, &format!("encoder.lstm{i}"), input, config.hidden, rng)
            })
            .collect();
        let projection = Linear::new(store, "encoder.proj", config.hidden, config.embedding_dim, true, rng);
        let init = GE2EScale::default();
        let scale_w = store.add("ge2e.w", Tensor::vector(vec![init.w]));
        let scale_b = store.add("ge2e.b", Tensor::vector(vec![init.b]));
        Ok(Self {
            config,
            layers,
            projection,
            scale_w,
            scale_b,
        })
    }

    /// Raw embedding `[D]` of a window `[T, n_mels]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, frames: &Tensor) -> Result<Var> {
        if frames.ndim() != 2 || frames.cols() != self.config.n_mels || frames.rows() == 0 {
            return Err(Error::shape(
                "speaker_encoder",
                format!("frames {:?}, expected [T, {}]", frames.shape(), self.config.n_mels),
            ));
        }
        let mut states: Vec<LstmState> = (0..self.layers.len())
            .map(|_| LstmState::zeros(tape, self.config.hidden))
            .collect();
        for t in 0..frames.rows() {
            let mut x = tape.constant(Tensor::vector(frames.row(t).to_vec()));
            for (cell, st) in self.layers.iter().zip(states.iter_mut()) {
                *st = cell.step(tape, p, x, *st)?;
                x = st.h;
            }
        }
        let last = states.last().expect("at least one layer").h;
        self.projection.forward(tape, p, last)
    }

    /// Unit-norm d-vector of one window.
    pub fn embed(&self, store: &ParamStore, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let raw = self.forward(&mut tape, &p, frames)?;
        let e = tape.l2_normalize(raw, COS_EPS)?;
        Ok(tape.data(e).to_vec())
    }

    pub fn scale(&self, store: &ParamStore) -> GE2EScale {
        GE2EScale {
            w: store.get(self.scale_w).item(),
            b: store.get(self.scale_b).item(),
        }
    }

    /// Keeps `ω ≥` [`MIN_SCALE`].
    pub fn clamp_scale(&self, store: &mut ParamStore) {
        let w = &mut store.get_mut(self.scale_w).data_mut()[0];
        *w = w.max(MIN_SCALE);
    }

    /// GE2E loss and parameter gradients over `N·M` windows in speaker-major
    /// order. Each window runs on its own tape in parallel; gradients are
    /// summed in window order.
    pub fn loss_and_gradients(
        &self,
        store: &ParamStore,
        windows: &[Tensor],
        n: usize,
        m: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        if windows.len() != n * m {
            return Err(Error::shape("ge2e_batch", format!("{} windows for {n}x{m}", windows.len())));
        }
        need_two(m)?;
        let forwards: Vec<(Tape, Var, Vec<Var>)> = windows
            .par_iter()
            .map(|w| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let out = self.forward(&mut tape, &p, w)?;
                Ok((tape, out, p.vars().to_vec()))
            })
            .collect::<Result<_>>()?;

        let d = self.config.embedding_dim;
        let raw: Vec<f64> = forwards.iter().flat_map(|(t, o, _)| t.data(*o).to_vec()).collect();
        let mut head = Tape::new();
        let raw_v = head.param(Tensor::new(vec![n * m, d], raw)?);
        let w = head.param(store.get(self.scale_w).clone());
        let b = head.param(store.get(self.scale_b).clone());
        let loss = ge2e_loss_from_raw(&mut head, raw_v, w, b, n, m)?;
        let hg = head.backward(loss)?;
        let d_raw = hg.tensor(&head, raw_v);

        let per_window: Vec<Vec<Tensor>> = forwards
            .par_iter()
            .enumerate()
            .map(|(i, (tape, out, vars))| {
                let g = tape.backward_with_seed(*out, d_raw.row(i))?;
                Ok(vars.iter().map(|&v| g.tensor(tape, v)).collect())
            })
            .collect::<Result<_>>()?;

        let mut grads: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for window in &per_window {
            for (acc, g) in grads.iter_mut().zip(window) {
                acc.add_assign(g.data());
            }
        }
        grads[self.scale_w.index()] = hg.tensor(&head, w);
        grads[self.scale_b.index()] = hg.tensor(&head, b);
        Ok((head.scalar(loss), grads))
    }
}

/// L2-normalised mean of unit d-vectors.
pub fn aggregate_dvectors(dvectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dvectors.first().ok_or_else(|| Error::invalid("no d-vectors to aggregate"))?;
    let mut mean = vec![0.0; first.len()];
    for v in dvectors {
        if v.len() != mean.len() {
            return Err(Error::shape("aggregate_dvectors", "d-vectors differ in length"));
        }
        mean.iter_mut().zip(v).for_each(|(a, b)| *a += b / dvectors.len() as f64);
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// Frames covered by a window of `window_s` at the mel hop.
pub fn window_frames(mel: &MelSpectrogram, window_s: f64) -> usize {
    ((window_s * 1000.0 / mel.hop_ms).round() as usize).max(1)
}

/// Reflect-pads `frames` to at least `len` rows.
fn reflect_pad(frames: &Tensor, len: usize) -> Tensor {
    let t = frames.rows();
    if t >= len {
        return frames.clone();
    }
    let period = 2 * (t - 1);
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let j = if period == 0 { 0 } else { i % period };
            let j = if j < t { j } else { period - j };
            frames.row(j).to_vec()
        })
        .collect();
    Tensor::from_rows(&rows).expect("uniform rows")
}

/// Splits a mel into windows at hop `(1 − overlap)·window`, embeds each and
/// returns the normalised mean. Inputs shorter than one window are
/// reflect-padded.
pub fn utterance_embedding(
    mel: &MelSpectrogram,
    net: &SpeakerEncoderNet,
    store: &ParamStore,
    window_s: f64,
    overlap: f64,
) -> Result<Vec<f64>> {
    if mel.n_frames() == 0 {
        return Err(Error::invalid("empty mel spectrogram"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("window overlap {overlap} outside [0, 1)")));
    }
    let win = window_frames(mel, window_s);
    let step = ((win as f64 * (1.0 - overlap)).round() as usize).max(1);
    let frames = reflect_pad(&mel.frames, win);
    let mut dvectors = Vec::new();
    let mut start = 0;
    while start + win <= frames.rows() {
        let rows: Vec<Vec<f64>> = (start..start + win).map(|r| frames.row(r).to_vec()).collect();
        dvectors.push(net.embed(store, &Tensor::from_rows(&rows)?)?);
        start += step;
    }
    aggregate_dvectors(&dvectors)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::numcore::{finite_diff_check, seeded_rng, SeededRng};

    fn rand_batch(rng: &mut SeededRng, n: usize, m: usize, d: usize) -> EmbeddingBatch {
        let raw = Tensor::new(vec![n * m, d], (0..n * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        EmbeddingBatch::from_raw(n, m, &raw).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b)).max(COS_EPS)
    }

    /// Direct sums over the batch, written independently of the matrix form.
    fn centroid_oracle(b: &EmbeddingBatch) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (n, m, d) = (b.n_speakers(), b.n_utterances(), b.dim());
        let mut full = vec![vec![0.0; d]; n];
        let mut excl = vec![vec![0.0; d]; n * m];
        for k in 0..n {
            for i in 0..m {
                for x in 0..d {
                    full[k][x] += b.get(k, i)[x] / m as f64;
                }
            }
            for skip in 0..m {
                for i in (0..m).filter(|&i| i != skip) {
                    for x in 0..d {
                        excl[k * m + skip][x] += b.get(k, i)[x] / (m - 1) as f64;
                    }
                }
            }
        }
        (full, excl)
    }

    fn similarity_oracle(b: &EmbeddingBatch, s: GE2EScale) -> Vec<Vec<f64>> {
        let (full, excl) = centroid_oracle(b);
        let (n, m) = (b.n_speakers(), b.n_utterances());
        (0..n * m)
            .map(|r| {
                let e = b.embeddings().row(r);
                (0..n)
                    .map(|k| {
                        let c = if k == r / m { &excl[r] } else { &full[k] };
                        s.w * cos(e, c) + s.b
                    })
                    .collect()
            })
            .collect()
    }

    fn naive_loss(s: &[Vec<f64>], m: usize) -> f64 {
        s.iter()
            .enumerate()
            .map(|(r, row)| -row[r / m] + row.iter().map(|v| v.exp()).sum::<f64>().ln())
            .sum()
    }

    #[test]
    fn centroid_examples() {
        let v = vec![0.6, 0.8];
        let b = EmbeddingBatch::new(1, 3, Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]).unwrap()).unwrap();
        let c = centroids(&b).unwrap();
        assert_eq!(c.full.row(0), v.as_slice());
        for r in 0..3 {
            for (a, b) in c.exclusive.row(r).iter().zip(&v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let (a, bb) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        let b = EmbeddingBatch::new(1, 2, Tensor::from_rows(&[a.clone(), bb.clone()]).unwrap()).unwrap();
        let c = centroids(&b).unwrap();
        assert_eq!(c.exclusive.row(0), bb.as_slice());
        assert_eq!(c.exclusive.row(1), a.as_slice());

        let b = EmbeddingBatch::new(1, 1, Tensor::from_rows(&[a]).unwrap()).unwrap();
        assert!(centroids(&b).is_err());
    }

    #[test]
    fn centroids_match_direct_sums() {
        let b = rand_batch(&mut seeded_rng(1), 3, 4, 8);
        let c = centroids(&b).unwrap();
        let (full, excl) = centroid_oracle(&b);
        for k in 0..3 {
            for x in 0..8 {
                assert!((c.full.at2(k, x) - full[k][x]).abs() < 1e-12);
            }
        }
        for r in 0..12 {
            for x in 0..8 {
                assert!((c.exclusive.at2(r, x) - excl[r][x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let b = rand_batch(&mut seeded_rng(2), 1, 3, 4);
        let s = similarity_matrix(&b, GE2EScale::default()).unwrap();
        assert_eq!(s.shape(), &[3, 1]);
        let o = similarity_oracle(&b, GE2EScale::default());
        for r in 0..3 {
            assert!((s.at2(r, 0) - o[r][0]).abs() < 1e-12);
        }

        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let b = EmbeddingBatch::new(2, 2, Tensor::from_rows(&rows).unwrap()).unwrap();
        let s = similarity_matrix(&b, GE2EScale { w: 1.0, b: 0.0 }).unwrap();
        assert_eq!(s.at2(0, 1), 0.0);
        assert_eq!(s.at2(3, 0), 0.0);
    }

    #[test]
    fn similarity_matches_loop_oracle() {
        let b = rand_batch(&mut seeded_rng(3), 3, 4, 5);
        let scale = GE2EScale { w: 7.5, b: -2.0 };
        let s = similarity_matrix(&b, scale).unwrap();
        let o = similarity_oracle(&b, scale);
        for r in 0..12 {
            for k in 0..3 {
                assert!((s.at2(r, k) - o[r][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let b = rand_batch(&mut seeded_rng(4), 1, 3, 4);
        let s = similarity_matrix(&b, GE2EScale::default()).unwrap();
        assert_eq!(ge2e_loss(&s, 1, 3).unwrap(), 0.0);

        let s = Tensor::from_rows(&[vec![50.0, -50.0], vec![50.0, -50.0], vec![-50.0, 50.0], vec![-50.0, 50.0]]).unwrap();
        assert!(ge2e_loss(&s, 2, 2).unwrap() < 1e-20);

        let b = rand_batch(&mut seeded_rng(5), 2, 2, 3);
        let s = similarity_matrix(&b, GE2EScale::default()).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| s.row(r).to_vec()).collect();
        assert!((ge2e_loss(&s, 2, 2).unwrap() - naive_loss(&rows, 2)).abs() < 1e-9);
    }

    #[test]
    fn ge2e_gradient_check() {
        let mut rng = seeded_rng(6);
        for (n, m) in [(2, 2), (2, 3)] {
            let mut store = ParamStore::new();
            let raw = store.add(
                "raw",
                Tensor::new(vec![n * m, 4], (0..n * m * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            );
            let w = store.add("w", Tensor::vector(vec![3.0]));
            let b = store.add("b", Tensor::vector(vec![-1.0]));
            let r = finite_diff_check(&store, 1e-5, |t, p| ge2e_loss_from_raw(t, p.var(raw), p.var(w), p.var(b), n, m))
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    fn tiny_net(seed: u64) -> (ParamStore, SpeakerEncoderNet) {
        let mut store = ParamStore::new();
        let cfg = SpeakerEncoderConfig {
            n_mels: 3,
            hidden: 4,
            layers: 2,
            embedding_dim: 3,
        };
        let net = SpeakerEncoderNet::new(&mut store, cfg, &mut seeded_rng(seed)).unwrap();
        (store, net)
    }

    fn rand_frames(rng: &mut SeededRng, t: usize, c: usize) -> Tensor {
        Tensor::new(vec![t, c], (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn split_tape_gradients_match_single_tape() {
        let (store, net) = tiny_net(7);
        let mut rng = seeded_rng(8);
        let windows: Vec<Tensor> = (0..6).map(|_| rand_frames(&mut rng, 4, 3)).collect();
        let (loss, grads) = net.loss_and_gradients(&store, &windows, 2, 3).unwrap();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let outs: Vec<Var> = windows.iter().map(|w| net.forward(&mut tape, &p, w).unwrap()).collect();
        let raw = tape.stack_rows(&outs).unwrap();
        let l = ge2e_loss_from_raw(&mut tape, raw, p.var(net.scale_w), p.var(net.scale_b), 2, 3).unwrap();
        let g = tape.backward(l).unwrap();
        assert!((tape.scalar(l) - loss).abs() < 1e-12);
        for (id, got) in store.ids().zip(&grads) {
            let want = g.tensor(&tape, p.var(id));
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "{}", store.name(id));
            }
        }
    }

    #[test]
    fn encoder_gradient_check() {
        let (mut store, net) = tiny_net(9);
        store.get_mut(net.scale_w).data_mut()[0] = 1.0;
        store.get_mut(net.scale_b).data_mut()[0] = 0.0;
        let mut rng = seeded_rng(10);
        let windows: Vec<Tensor> = (0..4).map(|_| rand_frames(&mut rng, 3, 3)).collect();
        let r = finite_diff_check(&store, 1e-5, |t, p| {
            let outs = windows.iter().map(|w| net.forward(t, p, w)).collect::<Result<Vec<_>>>()?;
            let raw = t.stack_rows(&outs)?;
            // The bias shifts every logit of a row equally, so its gradient is
            // structurally zero; it is pinned separately below.
            let b = t.constant(Tensor::vector(vec![0.0]));
            ge2e_loss_from_raw(t, raw, p.var(net.scale_w), b, 2, 2)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let (_, grads) = net.loss_and_gradients(&store, &windows, 2, 2).unwrap();
        assert!(grads[net.scale_b.index()].item().abs() < 1e-12);
    }

    #[test]
    fn scale_is_clamped_positive() {
        let (mut store, net) = tiny_net(11);
        store.get_mut(net.scale_w).data_mut()[0] = -3.0;
        net.clamp_scale(&mut store);
        assert_eq!(net.scale(&store).w, MIN_SCALE);
    }

    #[test]
    fn aggregation_examples() {
        let v = vec![0.6, 0.8];
        assert_eq!(aggregate_dvectors(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
        let out = aggregate_dvectors(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((out[0] - h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);
        assert!(aggregate_dvectors(&[]).is_err());
    }

    fn mel_of(frames: Tensor) -> MelSpectrogram {
        MelSpectrogram::new(frames, 25.0, 10.0).unwrap()
    }

    #[test]
    fn utterance_embedding_windows() {
        let (store, net) = tiny_net(12);
        let mut rng = seeded_rng(13);
        let one = rand_frames(&mut rng, 8, 3);
        let mel = mel_of(one.clone());
        let e = utterance_embedding(&mel, &net, &store, 0.08, 0.5).unwrap();
        assert_eq!(e, net.embed(&store, &one).unwrap());

        let long = mel_of(rand_frames(&mut rng, 23, 3));
        let e = utterance_embedding(&long, &net, &store, 0.08, 0.5).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-9);
        let manual: Vec<Vec<f64>> = [0usize, 4, 8, 12]
            .iter()
            .map(|&s| {
                let rows: Vec<Vec<f64>> = (s..s + 8).map(|r| long.frames.row(r).to_vec()).collect();
                net.embed(&store, &Tensor::from_rows(&rows).unwrap()).unwrap()
            })
            .collect();
        assert_eq!(e, aggregate_dvectors(&manual).unwrap());

        let short = mel_of(rand_frames(&mut rng, 3, 3));
        let e = utterance_embedding(&short, &net, &store, 0.08, 0.5).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reflect_padding_bounces() {
        let t = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let p = reflect_pad(&t, 8);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
        let one = Tensor::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(reflect_pad(&one, 3).data(), &[5.0, 5.0, 5.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loss_is_nonnegative_and_speaker_permutation_invariant(seed in 0u64..10_000, n in 1usize..5, m in 2usize..5) {
            let mut rng = seeded_rng(seed);
            let b = rand_batch(&mut rng, n, m, 4);
            let scale = GE2EScale { w: rng.gen_range(0.1..20.0), b: rng.gen_range(-5.0..5.0) };
            let l = ge2e_loss(&similarity_matrix(&b, scale).unwrap(), n, m).unwrap();
            prop_assert!(l >= 0.0);

            let perm: Vec<usize> = (0..n).rev().collect();
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .flat_map(|&k| (0..m).map(move |i| (k, i)))
                .map(|(k, i)| b.get(k, i).to_vec())
                .collect();
            let pb = EmbeddingBatch::new(n, m, Tensor::from_rows(&rows).unwrap()).unwrap();
            let lp = ge2e_loss(&similarity_matrix(&pb, scale).unwrap(), n, m).unwrap();
            prop_assert!((l - lp).abs() < 1e-12 * l.max(1.0));
        }

        #[test]
        fn saturated_margin_gives_tiny_loss(n in 2usize..5, m in 2usize..4) {
            let s = Tensor::new(
                vec![n * m, n],
                (0..n * m * n).map(|i| if (i / n) / m == i % n { 25.0 } else { -25.0 }).collect(),
            ).unwrap();
            prop_assert!(ge2e_loss(&s, n, m).unwrap() < 1e-12);
        }
    }
}
