use std::f64::consts::PI;

use proptest::prelude::*;

use super::mulaw::{bin_centre, compress};
use super::*;
use crate::numcore::Tensor;

fn sine(freq: f64, phase: f64, seconds: f64, amp: f64) -> AudioBuffer {
    let n = (seconds * 16_000.0) as usize;
    let s = (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0 + phase).sin())
        .collect();
    AudioBuffer::new(s, 16_000).unwrap()
}

fn silence(seconds: f64) -> AudioBuffer {
    AudioBuffer::new(vec![0.0; (seconds * 16_000.0) as usize], 16_000).unwrap()
}

#[test]
fn framing_count() {
    let cfg = MelConfig::default();
    assert_eq!((cfg.win_length(), cfg.hop_length()), (800, 200));
    let mel = melspectrogram(&silence(1.0), &cfg).unwrap();
    assert_eq!(mel.n_frames(), 77);
    assert_eq!(mel.n_frames(), 1 + (16_000 - 800) / 200);
}

#[test]
fn silence_sits_at_log_floor() {
    let mel = melspectrogram(&silence(0.2), &MelConfig::default()).unwrap();
    assert!(mel.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
}

#[test]
fn too_short_audio_is_rejected() {
    assert!(melspectrogram(&silence(0.01), &MelConfig::default()).is_err());
    assert!(vad(&silence(0.01), &VadConfig::default()).is_err());
}

#[test]
fn stft_matches_direct_dft() {
    let audio = sine(1234.0, 0.3, 0.1, 0.5);
    let (win, hop, n_fft) = (400, 160, 512);
    let spec = stft_magnitude(&audio.samples, win, hop, n_fft);
    let frame = &audio.samples[hop..hop + win];
    for k in [0usize, 10, 39, 40, 100, 256] {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, s) in frame.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
            let ang = -2.0 * PI * (k * i) as f64 / n_fft as f64;
            re += s * w * ang.cos();
            im += s * w * ang.sin();
        }
        assert!((spec[1][k] - re.hypot(im)).abs() < 1e-9);
    }
}

#[test]
fn sine_at_band_centre_peaks_in_that_band() {
    let cfg = MelConfig::default();
    let pts = mel_points(&cfg);
    for band in [20usize, 40, 60] {
        let mel = melspectrogram(&sine(pts[band + 1], 0.0, 0.3, 0.5), &cfg).unwrap();
        let row = mel.frame(2);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, band);
    }
}

#[test]
fn magnitude_is_phase_invariant() {
    let cfg = MelConfig::default();
    let a = melspectrogram(&sine(2500.0, 0.0, 0.3, 0.5), &cfg).unwrap();
    let b = melspectrogram(&sine(2500.0, 1.1, 0.3, 0.5), &cfg).unwrap();
    let row_a: Vec<f64> = a.frame(3).iter().map(|v| v.exp()).collect();
    let row_b: Vec<f64> = b.frame(3).iter().map(|v| v.exp()).collect();
    let peak = row_a.iter().cloned().fold(0.0, f64::max);
    for (x, y) in row_a.iter().zip(&row_b) {
        if *x > 0.1 * peak {
            assert!((x - y).abs() / x < 1e-6, "{x} vs {y}");
        }
    }
}

fn mel_from_rows(rows: &[Vec<f64>]) -> MelSpectrogram {
    MelSpectrogram::new(Tensor::from_rows(rows).unwrap(), 50.0, 12.5).unwrap()
}

#[test]
fn mfcc_examples() {
    let m = mfcc(&mel_from_rows(&[vec![2.5; 20]]), 13).unwrap();
    assert!(m.data().iter().all(|v| v.abs() < 1e-12));

    let x = [0.3, -1.2, 2.0, 0.7];
    let m = mfcc(&mel_from_rows(&[x.to_vec()]), 3).unwrap();
    for k in 1..4 {
        let direct: f64 = (0..4)
            .map(|n| x[n] * (PI * k as f64 * (2 * n + 1) as f64 / 8.0).cos())
            .sum::<f64>()
            * (2.0f64 / 4.0).sqrt();
        assert!((m.data()[k - 1] - direct).abs() < 1e-12);
    }

    let m = mfcc(&mel_from_rows(&[x.to_vec(), x.to_vec()]), 2).unwrap();
    assert_eq!(m.row(0), m.row(1));
    assert!(mfcc(&mel_from_rows(&[x.to_vec()]), 5).is_err());
}

#[test]
fn dct_basis_is_orthonormal() {
    for n in [1usize, 2, 7, 16, 80, 128] {
        let g = dct_basis(n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|t| g[i][t] * g[j][t]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "n={n} ({i},{j}) {dot}");
            }
        }
    }
}

#[test]
fn mulaw_examples() {
    assert_eq!(mulaw_encode(0.0, 512).unwrap(), 256);
    assert_eq!(mulaw_encode(1.0, 512).unwrap(), 511);
    assert_eq!(mulaw_encode(-1.0, 512).unwrap(), 0);
    assert!(mulaw_decode(256, 512).unwrap().abs() < 1.0 / 511.0);
    assert!(mulaw_encode(1.5, 512).is_err());
    assert!(mulaw_decode(512, 512).is_err());
    for x in [-1.0, 1.0] {
        let y = compress(mulaw_decode(mulaw_encode(x, 512).unwrap(), 512).unwrap(), 512);
        assert!((y - x).abs() <= 2.0 / 512.0);
    }
}

#[test]
fn mulaw_grid_error_is_half_a_bin() {
    for i in 0..=10_000 {
        let x = -1.0 + 2.0 * i as f64 / 10_000.0;
        let code = mulaw_encode(x, 512).unwrap();
        let y = compress(x, 512);
        let back = compress(mulaw_decode(code, 512).unwrap(), 512);
        assert!((back - y).abs() <= 1.0 / 512.0 + 1e-12, "{x}");
        assert!((bin_centre(code, 512) - y).abs() <= 1.0 / 512.0 + 1e-12);
    }
}

#[test]
fn vad_examples() {
    let cfg = VadConfig::default();
    assert!(vad(&silence(0.5), &cfg).unwrap().iter().all(|&s| s));
    let tone = AudioBuffer::new(vec![1.0; 8000], 16_000).unwrap();
    assert!(vad(&tone, &cfg).unwrap().iter().all(|&s| !s));
    assert!(vad(&sine(440.0, 0.0, 0.5, 1.0), &cfg).unwrap().iter().all(|&s| !s));

    let mut s = sine(440.0, 0.0, 0.5, 0.8).samples;
    s.extend(vec![0.0; 8000]);
    s.extend(sine(440.0, 0.0, 0.5, 0.8).samples);
    let mask = vad(&AudioBuffer::new(s, 16_000).unwrap(), &cfg).unwrap();
    let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    let tol = cfg.hangover_frames as f64 / mask.len() as f64;
    assert!((frac - 1.0 / 3.0).abs() <= tol, "{frac}");
}

#[test]
fn hangover_merges_only_short_interior_gaps() {
    let mut m = vec![true, true, false, true, true, false, true, true, true, false, true];
    apply_hangover(&mut m, 3);
    assert_eq!(m, vec![true, true, false, false, false, false, true, true, true, false, true]);
}

#[test]
fn wav_round_trip_and_format_checks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let audio = sine(300.0, 0.0, 0.05, 0.5);
    write_wav(&p, &audio).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.samples.len(), audio.samples.len());
    for (a, b) in audio.samples.iter().zip(&back.samples) {
        assert!((a - b).abs() < 1.0 / 16_000.0);
    }

    let p8 = dir.path().join("b.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p8, spec).unwrap();
    for i in 0..800 {
        w.write_sample((i % 100) as i16 * 100).unwrap();
    }
    w.finalize().unwrap();
    let up = read_wav(&p8).unwrap();
    assert_eq!(up.sample_rate, 16_000);
    assert_eq!(up.samples.len(), 1600);

    let ps = dir.path().join("c.wav");
    let spec = hound::WavSpec { channels: 2, ..spec };
    let mut w = hound::WavWriter::create(&ps, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&ps), Err(crate::Error::Audio(_))));
}

#[test]
fn linear_resampling_hits_midpoints() {
    let out = resample_linear(&[0.0, 1.0, 2.0, 3.0], 8000, 16_000);
    assert_eq!(out, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]);
}

proptest! {
    #[test]
    fn mulaw_round_trip_within_half_bin(x in -1.0f64..=1.0) {
        let y = compress(x, 512);
        let back = compress(mulaw_decode(mulaw_encode(x, 512).unwrap(), 512).unwrap(), 512);
        prop_assert!((back - y).abs() <= 1.0 / 512.0 + 1e-12);
    }

    #[test]
    fn vad_silence_monotone_in_threshold(seed in 0u64..1000, lo in -60.0f64..-5.0, delta in 0.0f64..30.0) {
        use rand::Rng;
        let mut rng = crate::numcore::seeded_rng(seed);
        let mut s = Vec::new();
        for _ in 0..12 {
            let amp = 10f64.powf(rng.gen_range(-4.0..0.0));
            let len = rng.gen_range(400..3000);
            s.extend((0..len).map(|i| amp * (i as f64 * 0.3).sin()));
        }
        let audio = AudioBuffer::new(s, 16_000).unwrap();
        let count = |db: f64| {
            let cfg = VadConfig { threshold_db: db, ..VadConfig::default() };
            vad(&audio, &cfg).unwrap().iter().filter(|&&m| m).count()
        };
        prop_assert!(count(lo) <= count(lo + delta));
    }
}
