//! Beta-binomial prior filter.

use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numcore::conv1d_same_values;

/// Underflow threshold below which the convolved prior is clamped.
pub const PRIOR_LOG_THRESHOLD: f64 = 1e-12;
/// Log value assigned to clamped positions.
pub const PRIOR_LOG_FLOOR: f64 = -1e6;

/// `taps[k]` is the beta-binomial pmf at `k` with `n = n_taps − 1` trials.
pub fn prior_filter_taps(n_taps: usize, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if n_taps == 0 {
        return Err(Error::invalid("prior filter needs at least one tap"));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "beta-binomial shape parameters must be positive, got alpha={alpha}, beta={beta}"
        )));
    }
    let n = (n_taps - 1) as f64;
    let log_norm = ln_beta(alpha, beta);
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|k| {
            let k = k as f64;
            let log_choose = ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0);
            (log_choose + ln_beta(k + alpha, n - k + beta) - log_norm).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Mean shift `Σ k·taps[k]` of a prior pmf.
pub fn prior_mean(taps: &[f64]) -> f64 {
    taps.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

/// Embeds a pmf over forward shifts `0..n` into a centred odd kernel of
/// length `2n − 1` for [`conv1d_same_values`], so that mass at `j` moves to
/// `j + k` with probability `taps[k]`.
pub fn prior_kernel(taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let mut kernel = vec![0.0; 2 * n - 1];
    for (m, &p) in taps.iter().enumerate() {
        kernel[n - 1 - m] = p;
    }
    kernel
}

/// `log(kernel ∗ prev)` with positions at or below [`PRIOR_LOG_THRESHOLD`]
/// set to [`PRIOR_LOG_FLOOR`]. `kernel` is centred (see [`prior_kernel`]).
pub fn apply_prior(prev_alignment: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    if kernel.len().is_multiple_of(2) {
        return Err(Error::invalid(format!("prior kernel must have odd length, got {}", kernel.len())));
    }
    Ok(conv1d_same_values(prev_alignment, kernel)
        .into_iter()
        .map(|v| if v <= PRIOR_LOG_THRESHOLD { PRIOR_LOG_FLOOR } else { v.ln() })
        .collect())
}
