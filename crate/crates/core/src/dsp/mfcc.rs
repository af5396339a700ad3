use std::f64::consts::PI;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Orthonormal DCT-II basis, `basis[k][n]` for `k, n < size`.
pub fn dct_basis(size: usize) -> Vec<Vec<f64>> {
    let n = size as f64;
    (0..size)
        .map(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..size)
                .map(|i| s * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .collect()
        })
        .collect()
}

/// Cepstral coefficients `1..=n_coeffs` of every log-mel frame; `c0` is
/// dropped.
pub fn mfcc(mel: &MelSpectrogram, n_coeffs: usize) -> Result<Tensor> {
    let n_mels = mel.n_mels();
    if n_coeffs + 1 > n_mels {
        return Err(Error::invalid(format!(
            "{n_coeffs} coefficients after c0 need more than {n_mels} mel bands"
        )));
    }
    let basis = dct_basis(n_mels);
    let mut data = Vec::with_capacity(mel.n_frames() * n_coeffs);
    for t in 0..mel.n_frames() {
        let frame = mel.frame(t);
        for row in &basis[1..=n_coeffs] {
            data.push(row.iter().zip(frame).map(|(b, x)| b * x).sum());
        }
    }
    Tensor::new(vec![mel.n_frames(), n_coeffs], data)
}
