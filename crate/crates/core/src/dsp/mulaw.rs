//! μ-law companding with uniform quantisation of the companded value.

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 512;

fn mu(levels: usize) -> f64 {
    (levels - 1) as f64
}

/// `sign(x)·ln(1 + μ|x|)/ln(1 + μ)`.
pub fn compress(x: f64, levels: usize) -> f64 {
    let mu = mu(levels);
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

/// Inverse of [`compress`].
pub fn expand(y: f64, levels: usize) -> f64 {
    let mu = mu(levels);
    y.signum() * ((mu.ln_1p() * y.abs()).exp() - 1.0) / mu
}

/// Quantises `x ∈ [−1, 1]` to a code in `0..levels`:
/// `floor((y + 1)/2 · levels)` clamped to the top code.
pub fn mulaw_encode(x: f64, levels: usize) -> Result<usize> {
    if levels < 2 {
        return Err(Error::invalid(format!("mu-law needs at least 2 levels, got {levels}")));
    }
    if !(x.abs() <= 1.0) {
        return Err(Error::invalid(format!("mu-law input {x} outside [-1, 1]")));
    }
    let y = compress(x, levels);
    let code = ((y + 1.0) / 2.0 * levels as f64).floor() as usize;
    Ok(code.min(levels - 1))
}

/// Maps a code to its bin centre in the companded domain, then expands.
pub fn mulaw_decode(code: usize, levels: usize) -> Result<f64> {
    if code >= levels {
        return Err(Error::invalid(format!("mu-law code {code} outside 0..{levels}")));
    }
    Ok(expand(bin_centre(code, levels), levels))
}

/// Companded-domain centre of a code's bin.
pub fn bin_centre(code: usize, levels: usize) -> f64 {
    (code as f64 + 0.5) * 2.0 / levels as f64 - 1.0
}
