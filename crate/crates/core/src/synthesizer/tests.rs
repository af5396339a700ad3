use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::attention::{AttentionConfig, AttentionKind};
use crate::numcore::{finite_diff_check, seeded_rng};

fn small_config(kind: AttentionKind) -> SynthConfig {
    let attention = AttentionConfig {
        attention_dim: 3,
        lsa_filters: 2,
        lsa_taps: 5,
        dca_static_filters: 2,
        dca_dynamic_filters: 2,
        dca_taps: 5,
        ..match kind {
            AttentionKind::Lsa => AttentionConfig::lsa(3),
            AttentionKind::Dca => AttentionConfig::dca(3),
        }
    };
    SynthConfig {
        n_symbols: 5,
        embedding_dim: 4,
        encoder_conv_layers: 3,
        encoder_kernel: 3,
        encoder_channels: 4,
        encoder_lstm: 3,
        speaker_dim: 4,
        speaker_projection_dim: 3,
        prenet_dims: [4, 4],
        decoder_lstm: [5, 5],
        mel_channels: 3,
        reduction_factor: 2,
        attention,
        postnet_layers: 3,
        postnet_channels: 4,
        postnet_kernel: 3,
        ..SynthConfig::toy(5, kind)
    }
    .without_regularisers()
}

fn with_mods(mut c: SynthConfig) -> SynthConfig {
    c.mod_speaker_projection = true;
    c.mod_skip_context = true;
    c.mod_prev_context = true;
    c
}

fn build(cfg: SynthConfig, seed: u64) -> (ParamStore, Synthesizer) {
    let mut store = ParamStore::new();
    let s = Synthesizer::new(&mut store, cfg, &mut seeded_rng(seed)).unwrap();
    (store, s)
}

fn unit(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn rand_mel(rng: &mut SeededRng, t: usize, c: usize) -> Tensor {
    Tensor::new(vec![t, c], (0..t * c).map(|_| rng.gen_range(-2.0..0.5)).collect()).unwrap()
}

// Plain re-implementations of the layers, reading weights from the store.

fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|o| w.row(o).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn lin(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let mut y = mv(store.get(l.w), x);
    if let Some(b) = l.b {
        y.iter_mut().zip(store.get(b).data()).for_each(|(a, b)| *a += b);
    }
    y
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm(store: &ParamStore, cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = cell.hidden;
    let a = mv(store.get(cell.w_ih), x);
    let b = mv(store.get(cell.w_hh), h);
    let g: Vec<f64> = (0..4 * n).map(|i| a[i] + b[i] + store.get(cell.b).data()[i]).collect();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        c2[k] = sig(g[n + k]) * c[k] + sig(g[k]) * g[2 * n + k].tanh();
        h2[k] = sig(g[3 * n + k]) * c2[k].tanh();
    }
    (h2, c2)
}

fn conv(store: &ParamStore, layer: &ConvLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w, b) = (store.get(layer.w), store.get(layer.b));
    let k = layer.kernel;
    let cin = x[0].len();
    (0..x.len())
        .map(|t| {
            (0..w.rows())
                .map(|o| {
                    let mut acc = b.data()[o];
                    for ci in 0..cin {
                        for kk in 0..k {
                            let idx = t as isize + kk as isize - (k / 2) as isize;
                            if idx >= 0 && (idx as usize) < x.len() {
                                acc += w.at2(o, ci * k + kk) * x[idx as usize][ci];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn encoder_oracle(store: &ParamStore, s: &Synthesizer, symbols: &[usize], d: &[f64]) -> Vec<Vec<f64>> {
    let emb = store.get(s.embedding);
    let mut x: Vec<Vec<f64>> = symbols.iter().map(|&i| emb.row(i).to_vec()).collect();
    for layer in &s.encoder_convs {
        x = conv(store, layer, &x).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    }
    let run = |cell: &LstmCell, order: Vec<usize>| {
        let (mut h, mut c) = (vec![0.0; cell.hidden], vec![0.0; cell.hidden]);
        let mut out = vec![Vec::new(); x.len()];
        for t in order {
            (h, c) = lstm(store, cell, &x[t], &h, &c);
            out[t] = h.clone();
        }
        out
    };
    let fwd = run(&s.encoder_fwd, (0..x.len()).collect());
    let bwd = run(&s.encoder_bwd, (0..x.len()).rev().collect());
    let spk = match &s.speaker_projection {
        Some(p) => lin(store, p, d),
        None => d.to_vec(),
    };
    (0..x.len()).map(|t| [fwd[t].clone(), bwd[t].clone(), spk.clone()].concat()).collect()
}

fn encode_values(store: &ParamStore, s: &Synthesizer, symbols: &[usize], d: &[f64]) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let enc = s.encode(&mut tape, &p, symbols, d, &mut Noise::Off).unwrap();
    tape.value(enc.keys).clone()
}

#[test]
fn encoder_shapes_and_speaker_block() {
    let mut rng = seeded_rng(1);
    for cfg in [small_config(AttentionKind::Dca), with_mods(small_config(AttentionKind::Dca))] {
        let (store, s) = build(cfg.clone(), 2);
        let (d1, d2) = (unit(&mut rng, 4), unit(&mut rng, 4));
        let k = encode_values(&store, &s, &[3], &d1);
        assert_eq!(k.shape(), &[1, cfg.key_dim()]);

        let text = [0usize, 4, 2, 2, 1];
        let (a, b) = (encode_values(&store, &s, &text, &d1), encode_values(&store, &s, &text, &d2));
        let enc = cfg.encoder_dim();
        for t in 0..text.len() {
            assert_eq!(a.row(t)[..enc], b.row(t)[..enc]);
            assert_ne!(a.row(t)[enc..], b.row(t)[enc..]);
            assert_eq!(a.row(t)[enc..], a.row(0)[enc..]);
        }
    }
}

#[test]
fn encoder_matches_layer_by_layer_oracle() {
    let mut rng = seeded_rng(3);
    for cfg in [small_config(AttentionKind::Lsa), with_mods(small_config(AttentionKind::Dca))] {
        let (store, s) = build(cfg, 4);
        let d = unit(&mut rng, 4);
        let text = [1usize, 0, 3, 4, 4, 2, 0];
        let got = encode_values(&store, &s, &text, &d);
        let want = encoder_oracle(&store, &s, &text, &d);
        for (t, row) in want.iter().enumerate() {
            for (a, b) in got.row(t).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_input_validation() {
    let (store, s) = build(small_config(AttentionKind::Dca), 5);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let d = [1.0, 0.0, 0.0, 0.0];
    assert!(s.encode(&mut tape, &p, &[5], &d, &mut Noise::Off).is_err());
    assert!(s.encode(&mut tape, &p, &[], &d, &mut Noise::Off).is_err());
    assert!(s.encode(&mut tape, &p, &[1], &[2.0, 0.0, 0.0, 0.0], &mut Noise::Off).is_err());
    assert!(s.encode(&mut tape, &p, &[1], &[1.0, 0.0], &mut Noise::Off).is_err());
}

fn zero_all(store: &mut ParamStore) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_weights_emit_biases() {
    let (mut store, s) = build(small_config(AttentionKind::Dca), 6);
    zero_all(&mut store);
    let fb = vec![0.3, -0.2, 0.1, 0.05, 0.7, -1.0];
    store.get_mut(s.frame_projection.b.unwrap()).data_mut().copy_from_slice(&fb);
    store.get_mut(s.stop_projection.b.unwrap()).data_mut()[0] = 0.7;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let enc = s.encode(&mut tape, &p, &[1, 2, 3], &[0.0, 1.0, 0.0, 0.0], &mut Noise::Off).unwrap();
    let keys = s.attention.prepare(&mut tape, &p, enc.keys).unwrap();
    let mut st = s.initial_state(&mut tape, &enc).unwrap();
    for _ in 0..3 {
        let out = s.decode_step(&mut tape, &p, &keys, &st, Feed::Free, &mut Noise::Off).unwrap();
        assert_eq!(tape.data(out.frames), fb.as_slice());
        assert_eq!(tape.data(out.stop_logit), &[0.7]);
        st = out.state;
    }
}

#[test]
fn single_key_attention_is_trivial() {
    for kind in [AttentionKind::Lsa, AttentionKind::Dca] {
        let (store, s) = build(with_mods(small_config(kind)), 7);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let enc = s.encode(&mut tape, &p, &[2], &[0.0, 0.0, 1.0, 0.0], &mut Noise::Off).unwrap();
        let key = tape.data(enc.keys).to_vec();
        let keys = s.attention.prepare(&mut tape, &p, enc.keys).unwrap();
        let mut st = s.initial_state(&mut tape, &enc).unwrap();
        for _ in 0..4 {
            let out = s.decode_step(&mut tape, &p, &keys, &st, Feed::Free, &mut Noise::Off).unwrap();
            assert_eq!(tape.data(out.alignment), &[1.0]);
            assert_eq!(tape.data(out.context), key.as_slice());
            st = out.state;
        }
    }
}

/// Straight-line decoder step: every layer recomputed by hand except the
/// attention mechanism, which runs on its own tape from the oracle's query.
#[allow(clippy::too_many_arguments)]
fn step_oracle(
    store: &ParamStore,
    s: &Synthesizer,
    keys: &Tensor,
    prev_frame: &[f64],
    prev_ctx: &[f64],
    prev_align: &[f64],
    lstm_state: &[(Vec<f64>, Vec<f64>); 2],
) -> (Vec<f64>, f64, Vec<f64>, Vec<f64>, [(Vec<f64>, Vec<f64>); 2]) {
    let c = &s.config;
    let mut x = prev_frame.to_vec();
    for l in &s.prenet {
        x = lin(store, l, &x).into_iter().map(|v| v.max(0.0)).collect();
    }
    let (h1, c1) = lstm(store, &s.decoder[0], &[x, prev_ctx.to_vec()].concat(), &lstm_state[0].0, &lstm_state[0].1);
    let in2 = if c.mod_skip_context { [h1.clone(), prev_ctx.to_vec()].concat() } else { h1.clone() };
    let (h2, c2) = lstm(store, &s.decoder[1], &in2, &lstm_state[1].0, &lstm_state[1].1);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let kv = tape.constant(keys.clone());
    let prepared = s.attention.prepare(&mut tape, &p, kv).unwrap();
    let state = AlignmentState {
        prev_alignment: tape.constant(Tensor::vector(prev_align.to_vec())),
        mask: vec![true; keys.rows()].into(),
    };
    let dq = tape.constant(Tensor::vector(h2.clone()));
    let att = s.attention.step(&mut tape, &p, dq, &prepared, &state, None).unwrap();
    let alpha = tape.data(att.alignment).to_vec();
    let ctx: Vec<f64> = (0..keys.cols()).map(|k| (0..keys.rows()).map(|j| alpha[j] * keys.at2(j, k)).sum()).collect();

    let proj_ctx = if c.mod_prev_context { prev_ctx.to_vec() } else { ctx.clone() };
    let frames = lin(store, &s.frame_projection, &[h2.clone(), proj_ctx].concat());
    let stop = lin(store, &s.stop_projection, &[h2.clone(), ctx.clone()].concat())[0];
    (frames, stop, alpha, ctx, [(h1, c1), (h2, c2)])
}

#[test]
fn decode_steps_match_straight_line_oracle() {
    let mut rng = seeded_rng(8);
    for cfg in [
        small_config(AttentionKind::Lsa),
        small_config(AttentionKind::Dca),
        with_mods(small_config(AttentionKind::Lsa)),
        with_mods(small_config(AttentionKind::Dca)),
    ] {
        let (store, s) = build(cfg.clone(), 9);
        let d = unit(&mut rng, 4);
        let text = [0usize, 3, 1, 2, 4, 4];
        let targets = rand_mel(&mut rng, 8, 3);

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let enc = s.encode(&mut tape, &p, &text, &d, &mut Noise::Off).unwrap();
        let keys_val = tape.value(enc.keys).clone();
        let keys = s.attention.prepare(&mut tape, &p, enc.keys).unwrap();
        let mut st = s.initial_state(&mut tape, &enc).unwrap();

        let zeros = |n| (vec![0.0; n], vec![0.0; n]);
        let mut o_state = [zeros(5), zeros(5)];
        let mut o_frame = vec![0.0; 3];
        let mut o_ctx = vec![0.0; cfg.key_dim()];
        let mut o_align: Vec<f64> = (0..text.len()).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
        for i in 0..4 {
            let teacher = targets.row(2 * i + 1);
            let feed = if i % 2 == 0 { Feed::Teacher(teacher) } else { Feed::Free };
            let out = s.decode_step(&mut tape, &p, &keys, &st, feed, &mut Noise::Off).unwrap();
            let (frames, stop, alpha, ctx, lstm_st) =
                step_oracle(&store, &s, &keys_val, &o_frame, &o_ctx, &o_align, &o_state);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
            assert!(close(tape.data(out.frames), &frames));
            assert!((tape.data(out.stop_logit)[0] - stop).abs() < 1e-10);
            assert!(close(tape.data(out.alignment), &alpha));
            assert!(close(tape.data(out.context), &ctx));
            o_frame = match feed {
                Feed::Teacher(f) => f.to_vec(),
                Feed::Free => frames[3..].to_vec(),
            };
            assert!(close(tape.data(out.state.prev_frame), &o_frame));
            o_ctx = ctx;
            o_align = alpha;
            o_state = lstm_st;
            st = out.state;
        }
    }
}

#[test]
fn projection_reads_previous_context_under_mod_c() {
    for mod_c in [true, false] {
        let mut cfg = small_config(AttentionKind::Dca);
        cfg.mod_prev_context = mod_c;
        let (store, s) = build(cfg, 10);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let enc = s.encode(&mut tape, &p, &[1, 2, 3, 4], &[0.5, 0.5, 0.5, 0.5], &mut Noise::Off).unwrap();
        let keys = s.attention.prepare(&mut tape, &p, enc.keys).unwrap();
        let mut st = s.initial_state(&mut tape, &enc).unwrap();
        let mut prev_ctx = tape.data(st.prev_context).to_vec();
        for _ in 0..5 {
            let out = s.decode_step(&mut tape, &p, &keys, &st, Feed::Free, &mut Noise::Off).unwrap();
            let used = tape.data(out.projection_context).to_vec();
            if mod_c {
                assert_eq!(used, prev_ctx);
            } else {
                assert_eq!(used, tape.data(out.context));
            }
            prev_ctx = tape.data(out.context).to_vec();
            st = out.state;
        }
    }
}

#[test]
fn stop_bias_controls_termination() {
    let (mut store, s) = build(small_config(AttentionKind::Dca), 11);
    let b = s.stop_projection.b.unwrap();
    let d = [0.0, 0.0, 0.0, 1.0];
    store.get_mut(s.stop_projection.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.get_mut(b).data_mut()[0] = 50.0;
    let out = s.synthesize(&store, &[1, 2], &d, &SynthesisOptions::new(10)).unwrap();
    assert_eq!((out.steps(), out.mel_before.rows(), out.truncated), (1, 2, false));
    store.get_mut(b).data_mut()[0] = -50.0;
    let out = s.synthesize(&store, &[1, 2], &d, &SynthesisOptions::new(10)).unwrap();
    assert_eq!((out.steps(), out.mel_after.rows(), out.truncated), (10, 20, true));
    assert_eq!(out.alignment.shape(), &[10, 2]);
    assert!(s.synthesize(&store, &[1], &d, &SynthesisOptions::new(0)).is_err());
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let (mut store, s) = build(with_mods(small_config(AttentionKind::Dca)), 12);
    store.get_mut(s.stop_projection.b.unwrap()).data_mut()[0] = -50.0;
    let d = [0.0, 0.6, 0.8, 0.0];
    let opts = SynthesisOptions {
        prenet_seed: Some(3),
        ..SynthesisOptions::new(6)
    };
    let mut cfg = s.config.clone();
    cfg.prenet_dropout = 0.5;
    let s = Synthesizer { config: cfg, ..s };
    let a = s.synthesize(&store, &[0, 1, 2], &d, &opts).unwrap();
    assert_eq!(a, s.synthesize(&store, &[0, 1, 2], &d, &opts).unwrap());
    let other = SynthesisOptions { prenet_seed: Some(4), ..opts };
    assert_ne!(a.mel_before, s.synthesize(&store, &[0, 1, 2], &d, &other).unwrap().mel_before);
}

fn const_vars(tape: &mut Tape, before: &Tensor, after: &Tensor, stops: &[f64]) -> SynthVars {
    SynthVars {
        mel_before: tape.constant(before.clone()),
        mel_after: tape.constant(after.clone()),
        stop_logits: tape.constant(Tensor::vector(stops.to_vec())),
        alignments: Vec::new(),
    }
}

fn naive_loss(before: &Tensor, after: &Tensor, stops: &[f64], t: &Targets) -> f64 {
    let mut l1 = [0.0; 2];
    let mut l2 = [0.0; 2];
    let mut n = 0.0;
    for r in 0..t.mel.rows() {
        if !t.frame_mask[r] {
            continue;
        }
        for c in 0..t.mel.cols() {
            n += 1.0;
            for (k, pred) in [before, after].iter().enumerate() {
                let e = pred.at2(r, c) - t.mel.at2(r, c);
                l1[k] += e.abs();
                l2[k] += e * e;
            }
        }
    }
    let mut bce = 0.0;
    let mut m = 0.0;
    for (i, &x) in stops.iter().enumerate() {
        if t.step_mask[i] {
            let p = sig(x);
            bce -= t.stop[i] * p.ln() + (1.0 - t.stop[i]) * (1.0 - p).ln();
            m += 1.0;
        }
    }
    (l1[0] + l2[0] + l1[1] + l2[1]) / n + bce / m
}

#[test]
fn loss_examples() {
    let mut rng = seeded_rng(13);
    let target = rand_mel(&mut rng, 5, 3);
    let t = Targets::new(&target, 2).unwrap();
    assert_eq!((t.steps(), t.mel.rows(), t.stop.clone()), (3, 6, vec![0.0, 0.0, 1.0]));
    let perfect_stops = [-50.0, -50.0, 50.0];

    let mut tape = Tape::new();
    let v = const_vars(&mut tape, &t.mel, &t.mel, &perfect_stops);
    let l = synth_loss(&mut tape, &v, &t).unwrap();
    assert!(tape.scalar(l) < 1e-12);

    let shifted = t.mel.map(|x| x + 1.0);
    let v = const_vars(&mut tape, &shifted, &t.mel, &perfect_stops);
    let l = synth_loss(&mut tape, &v, &t).unwrap();
    assert!((tape.scalar(l) - 2.0).abs() < 1e-12);

    let (b, a) = (rand_mel(&mut rng, 6, 3), rand_mel(&mut rng, 6, 3));
    let stops: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let v = const_vars(&mut tape, &b, &a, &stops);
    let l = synth_loss(&mut tape, &v, &t).unwrap();
    assert!((tape.scalar(l) - naive_loss(&b, &a, &stops, &t)).abs() < 1e-10);

    let v = const_vars(&mut tape, &rand_mel(&mut rng, 4, 3), &a, &stops);
    assert!(synth_loss(&mut tape, &v, &t).is_err());
    assert!(Targets::new(&Tensor::zeros(&[0, 3]), 2).is_err());
}

#[test]
fn padding_is_masked_out_of_the_loss() {
    let mut rng = seeded_rng(14);
    let t = Targets::new(&rand_mel(&mut rng, 7, 3), 2).unwrap();
    let (b, a) = (rand_mel(&mut rng, 8, 3), rand_mel(&mut rng, 8, 3));
    let stops: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut tape = Tape::new();
    let v = const_vars(&mut tape, &b, &a, &stops);
    let base = synth_loss(&mut tape, &v, &t).unwrap();
    let base = tape.scalar(base);

    let padded = t.clone().with_masked_padding(3, 2).unwrap();
    let extend = |m: &Tensor, rng: &mut SeededRng| {
        let mut d = m.data().to_vec();
        d.extend((0..18).map(|_| rng.gen_range(-9.0..9.0)));
        Tensor::new(vec![14, 3], d).unwrap()
    };
    let (b2, a2) = (extend(&b, &mut rng), extend(&a, &mut rng));
    let mut stops2 = stops.clone();
    stops2.extend([4.0, -7.0, 1.0]);
    let v = const_vars(&mut tape, &b2, &a2, &stops2);
    let l = synth_loss(&mut tape, &v, &padded).unwrap();
    assert!((tape.scalar(l) - base).abs() < 1e-12);
}

#[test]
fn single_step_target_runs_one_step() {
    let (store, s) = build(small_config(AttentionKind::Dca), 15);
    let mut rng = seeded_rng(16);
    let t = Targets::new(&rand_mel(&mut rng, 2, 3), 2).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (loss, out) = s.teacher_forced_forward(&mut tape, &p, &[1, 2, 3], &unit(&mut rng, 4), &t, &mut Noise::Off).unwrap();
    assert_eq!(out.steps(), 1);
    assert_eq!(out.alignment.rows(), 1);
    assert!(tape.scalar(loss).is_finite());
}

#[test]
fn teacher_forced_gradients_match_finite_differences() {
    let mut rng = seeded_rng(17);
    for cfg in [small_config(AttentionKind::Lsa), with_mods(small_config(AttentionKind::Dca))] {
        let (mut store, s) = build(cfg, 18);
        // Moves zero biases off the ReLU kinks the zero initial frame would hit.
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let d = unit(&mut rng, 4);
        let t = Targets::new(&rand_mel(&mut rng, 5, 3), 2).unwrap();
        let text = [0usize, 2, 4, 1];
        // Step 1e-4: some coordinates have gradients near 1e-8 on an O(1)
        // loss, where a smaller step is dominated by cancellation.
        let r = finite_diff_check(&store, 1e-4, |tape, p| {
            let v = s.teacher_forced_vars(tape, p, &text, &d, &t, &mut Noise::Off)?;
            synth_loss(tape, &v, &t)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn presets_and_validation() {
    let p = SynthConfig::preset("proposed", 8).unwrap();
    assert!(p.mod_speaker_projection && p.mod_skip_context && p.mod_prev_context);
    assert_eq!((p.zoneout, p.attention.dynamic_dropout), ([0.1, 0.15], 0.1));
    assert_eq!(SynthConfig::preset("lsa", 8).unwrap().attention.kind, AttentionKind::Lsa);
    assert!(SynthConfig::preset("tts", 8).is_err());
    let mut bad = SynthConfig::toy(8, AttentionKind::Dca);
    bad.reduction_factor = 0;
    assert!(bad.validate().is_err());
    let mut bad = SynthConfig::toy(8, AttentionKind::Dca);
    bad.encoder_kernel = 4;
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alignment_rows_are_distributions(seed in 0u64..1000, l in 1usize..12, lsa in any::<bool>()) {
        let kind = if lsa { AttentionKind::Lsa } else { AttentionKind::Dca };
        let (store, s) = build(with_mods(small_config(kind)), seed);
        let mut rng = seeded_rng(seed);
        let text: Vec<usize> = (0..l).map(|_| rng.gen_range(0..5)).collect();
        let out = s.synthesize(&store, &text, &unit(&mut rng, 4), &SynthesisOptions::new(6)).unwrap();
        for r in 0..out.alignment.rows() {
            let row = out.alignment.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
    }
}
