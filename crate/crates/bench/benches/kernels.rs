use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use dcatts::attention::{init_alignment, Attention, AttentionConfig};
use dcatts::dsp::{melspectrogram, AudioBuffer, MelConfig};
use dcatts::ge2e::{SpeakerEncoderConfig, SpeakerEncoderNet};
use dcatts::harness::{ExperimentConfig, ModelKind};
use dcatts::metrics::{dtw, eer, ScoreSet};
use dcatts::numcore::{seeded_rng, ParamStore, SeededRng, Tape, Tensor};
use dcatts::synthesizer::{Noise, Synthesizer, Targets};

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn attention_steps(c: &mut Criterion) {
    let (l, steps) = (128, 16);
    for cfg in [AttentionConfig::lsa(32), AttentionConfig::dca(32)] {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let att = Attention::new(&mut store, "att", &cfg, 64, 32, &mut rng).unwrap();
        let keys = rand_tensor(&mut rng, &[l, 32]);
        let queries: Vec<Tensor> = (0..steps).map(|_| rand_tensor(&mut rng, &[64])).collect();
        c.bench_function(&format!("attention_{}_L{l}_x{steps}_fwd_bwd", cfg.kind.as_str()), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let kv = tape.constant(keys.clone());
                let prep = att.prepare(&mut tape, &p, kv).unwrap();
                let mut st = init_alignment(&mut tape, l).unwrap();
                let mut ctx = Vec::with_capacity(steps);
                for q in &queries {
                    let d = tape.constant(q.clone());
                    let out = att.step(&mut tape, &p, d, &prep, &st, None).unwrap();
                    ctx.push(out.context);
                    st = out.state;
                }
                let all = tape.concat(&ctx).unwrap();
                let loss = tape.sum(all).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
}

fn synth_step(c: &mut Criterion) {
    for model in ModelKind::ALL {
        let cfg = ExperimentConfig::for_model(model).synth_config().unwrap();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        let synth = Synthesizer::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let symbols: Vec<usize> = (0..20).map(|_| rng.gen_range(0..cfg.n_symbols)).collect();
        let dvec: Vec<f64> = (0..cfg.speaker_dim).map(|_| rng.gen_range(-0.25..0.25)).collect();
        let targets = Targets::new(&rand_tensor(&mut rng, &[80, cfg.mel_channels]), cfg.reduction_factor).unwrap();
        c.bench_function(&format!("synth_{}_teacher_forced_T80", model.as_str()), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let (loss, _) = synth
                    .teacher_forced_forward(&mut tape, &p, &symbols, &dvec, &targets, &mut Noise::Off)
                    .unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
}

fn ge2e_batch(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(3);
    let net = SpeakerEncoderNet::new(&mut store, SpeakerEncoderConfig::default(), &mut rng).unwrap();
    let windows: Vec<Tensor> = (0..8 * 10).map(|_| rand_tensor(&mut rng, &[24, 16])).collect();
    c.bench_function("ge2e_8x10_loss_and_gradients", |b| {
        b.iter(|| net.loss_and_gradients(&store, &windows, 8, 10).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeded_rng(4);
    let (a, b) = (rand_tensor(&mut rng, &[200, 13]), rand_tensor(&mut rng, &[240, 13]));
    c.bench_function("dtw_200x240", |bch| bch.iter(|| dtw(&a, &b).unwrap()));

    let scores = ScoreSet::new(
        (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect(),
        (0..10_000).map(|_| rng.gen_range(-0.5..0.7)).collect(),
    )
    .unwrap();
    c.bench_function("eer_1k_vs_10k", |bch| bch.iter(|| eer(&scores).unwrap()));

    let audio = AudioBuffer::new((0..16_000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap();
    let cfg = MelConfig::default();
    c.bench_function("melspectrogram_1s_80", |bch| {
        bch.iter_batched(|| audio.clone(), |x| melspectrogram(&x, &cfg).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, attention_steps, synth_step, ge2e_batch, metrics);
criterion_main!(benches);
