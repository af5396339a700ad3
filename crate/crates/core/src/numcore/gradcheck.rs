//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::params::{Bindings, ParamStore};
use crate::numcore::tape::{Tape, Var};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Which coordinates of each parameter tensor get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, drawn with the given seed.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Compares the tape gradient of the scalar `f` against central differences
/// over every coordinate of every parameter.
///
/// Returns the max over coordinates of
/// `|analytic − cd| / max(|analytic|, |cd|, 1e−8)`.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    finite_diff_check_with(params, eps, Coverage::All, f)
}

pub fn finite_diff_check_with<F>(params: &ParamStore, eps: f64, coverage: Coverage, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape);
    let out = f(&mut tape, &bind)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = bind
        .vars()
        .iter()
        .map(|&v| grads.tensor(&tape, v).into_data())
        .collect();
    drop(tape);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bind = p.bind_frozen(&mut tape);
        let out = f(&mut tape, &bind)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("finite_diff_check", "function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut c = sample(rng, n, per_tensor).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let cd = (up - down) / (2.0 * eps);
            let a = analytic[id.index()][i];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
