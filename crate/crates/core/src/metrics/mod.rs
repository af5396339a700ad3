//! Objective evaluation: alignment diagonality, DTW-aligned cepstral
//! distortion, character error rate, silence rate, cosine similarity and
//! equal error rate.

mod report;

pub use report::{read_reports, write_reports, RunReport, REPORT_COLUMNS, REPORT_VERSION};

use std::path::Path;

use crate::dsp::{mfcc, vad, AudioBuffer, MelSpectrogram, VadConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Cepstral coefficients compared by [`mcd`] (`c1..=c13`).
pub const MCD_COEFFS: usize = 13;
/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Mean over encoder positions of the largest weight any decoder step puts
/// there. `alignment` is `[steps, L]` with rows summing to one.
pub fn attention_diagonal_score(alignment: &Tensor) -> Result<f64> {
    if alignment.ndim() != 2 || alignment.is_empty() {
        return Err(Error::shape("attention_diagonal_score", format!("{:?}", alignment.shape())));
    }
    alignment.ensure_finite("alignment")?;
    for r in 0..alignment.rows() {
        let s: f64 = alignment.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("alignment row {r} sums to {s}")));
        }
    }
    let l = alignment.cols();
    let mut best = vec![f64::NEG_INFINITY; l];
    for r in 0..alignment.rows() {
        for (b, &v) in best.iter_mut().zip(alignment.row(r)) {
            *b = b.max(v);
        }
    }
    Ok(best.iter().sum::<f64>() / l as f64)
}

/// Optimal warping between two frame sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    pub cost: f64,
    /// Monotone `(i, j)` pairs from `(0, 0)` to `(T1 − 1, T2 − 1)`.
    pub path: Vec<(usize, usize)>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with unit steps down, right and diagonal and
/// Euclidean frame cost. Ties prefer the diagonal, then down.
pub fn dtw(a: &Tensor, b: &Tensor) -> Result<DtwAlignment> {
    if a.ndim() != 2 || b.ndim() != 2 || a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols() {
        return Err(Error::shape("dtw", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = euclid(a.row(i), b.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let down = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let right = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(down).min(right)
            };
            acc[i * m + j] = prev + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let down = acc[(i - 1) * m + j];
            let right = acc[i * m + j - 1];
            if diag <= down && diag <= right {
                (i - 1, j - 1)
            } else if down <= right {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwAlignment {
        cost: acc[n * m - 1],
        path,
    })
}

/// `10√2 / ln 10`, converting natural-log cepstral distance to decibels.
pub fn mcd_scale() -> f64 {
    10.0 * 2f64.sqrt() / std::f64::consts::LN_10
}

/// Mean scaled cepstral distance along the DTW path of two MFCC sequences.
pub fn mcd_from_mfcc(ca: &Tensor, cb: &Tensor) -> Result<f64> {
    let align = dtw(ca, cb)?;
    let total: f64 = align.path.iter().map(|&(i, j)| euclid(ca.row(i), cb.row(j))).sum();
    Ok(mcd_scale() * total / align.path.len() as f64)
}

/// Mel-cepstral distortion over coefficients `1..=13` after DTW alignment.
pub fn mcd(mel_a: &MelSpectrogram, mel_b: &MelSpectrogram) -> Result<f64> {
    if mel_a.n_mels() != mel_b.n_mels() {
        return Err(Error::shape(
            "mcd",
            format!("{} vs {} mel bands", mel_a.n_mels(), mel_b.n_mels()),
        ));
    }
    mcd_from_mfcc(&mfcc(mel_a, MCD_COEFFS)?, &mfcc(mel_b, MCD_COEFFS)?)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lower-cases and collapses whitespace runs to single spaces, trimming ends.
pub fn normalize_text(s: &str) -> Vec<char> {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .flat_map(char::to_lowercase)
        .collect()
}

/// `Lev(ref, hyp) / |ref|` over arbitrary tokens.
pub fn token_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("reference sequence is empty"));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// `Lev(ref, hyp) / |ref|` on normalised text.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    token_error_rate(&normalize_text(reference), &normalize_text(hypothesis))
}

/// Fraction of VAD frames labelled silent under default VAD settings.
pub fn silence_rate(audio: &AudioBuffer) -> Result<f64> {
    let mask = vad(audio, &VadConfig::default())?;
    Ok(mask.iter().filter(|&&s| s).count() as f64 / mask.len() as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb).max(COSINE_EPS))
}

/// Verification trial scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() || impostor.is_empty() {
            return Err(Error::invalid("EER needs at least one genuine and one impostor score"));
        }
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("verification score".into()));
        }
        Ok(Self { genuine, impostor })
    }

    /// Reads `label,score` rows with labels `genuine` or `impostor`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
        for rec in rdr.deserialize::<(String, f64)>() {
            let (label, score) = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            match label.as_str() {
                "genuine" => genuine.push(score),
                "impostor" => impostor.push(score),
                other => return Err(Error::Format(format!("{}: unknown label {other:?}", path.display()))),
            }
        }
        Self::new(genuine, impostor)
    }
}

/// Equal error rate. Thresholds sweep the sorted score union followed by
/// `+∞`; at each, FAR is the impostor fraction `≥ t` and FRR the genuine
/// fraction `< t`. The rate is read where `FAR − FRR` changes sign,
/// interpolating linearly between the bracketing thresholds.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let scores = ScoreSet::new(scores.genuine.clone(), scores.impostor.clone())?;
    let mut gen = scores.genuine;
    let mut imp = scores.impostor;
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let rates = |t: f64| {
        let far = (imp.len() - imp.partition_point(|&s| s < t)) as f64 / ni;
        let frr = gen.partition_point(|&s| s < t) as f64 / ng;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds[1..] {
        let cur = rates(t);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d1 <= 0.0 {
            let lambda = if d0 == d1 { 0.0 } else { d0 / (d0 - d1) };
            return Ok(prev.0 + lambda * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR − FRR is −1 at the +∞ threshold")
}
