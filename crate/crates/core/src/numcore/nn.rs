//! Layer building blocks composed from tape primitives.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};

use crate::error::{Error, Result};
use crate::numcore::params::{glorot, Bindings, ParamId, ParamStore};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Fully connected layer `W x + b` with `W [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(rng, output, input));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { w, b, input, output }
    }

    /// Applies to a vector `[in]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(p.var(self.w), x)?;
        match self.b {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    /// Applies row-wise to a matrix `[rows, in]`.
    pub fn forward_rows(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Hidden and cell state of one LSTM layer.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[hidden])),
            c: tape.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// Single LSTM cell with gates ordered `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), glorot(rng, 4 * hidden, input));
        let w_hh = store.add(format!("{name}.w_hh"), glorot(rng, 4 * hidden, hidden));
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.bias"), Tensor::vector(bias));
        Self {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bindings, x: Var, state: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let xi = tape.matmul(p.var(self.w_ih), x)?;
        let hh = tape.matmul(p.var(self.w_hh), state.h)?;
        let gates = tape.add(xi, hh)?;
        let gates = tape.add(gates, p.var(self.b))?;
        let i = tape.slice(gates, 0, h)?;
        let f = tape.slice(gates, h, h)?;
        let g = tape.slice(gates, 2 * h, h)?;
        let o = tape.slice(gates, 3 * h, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let ct = tape.tanh(c)?;
        let h = tape.mul(o, ct)?;
        Ok(LstmState { h, c })
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 − p)`. Identity unless
/// `rng` is supplied.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut impl Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::invalid(format!("dropout probability {p} must be < 1")));
    }
    let n = tape.value(x).len();
    let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::invalid(e.to_string()))?;
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if keep.sample(rng) { scale } else { 0.0 })
        .collect();
    let shape = tape.value(x).shape().to_vec();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Zoneout: each unit keeps its previous value with probability `p`.
///
/// With a random source the mask is sampled; without one the expectation
/// `p·prev + (1 − p)·new` is used. `p = 1` returns `prev` and `p = 0`
/// returns `new` exactly in both cases.
pub fn zoneout(tape: &mut Tape, prev: Var, new: Var, p: f64, rng: Option<&mut impl Rng>) -> Result<Var> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("zoneout probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(new);
    }
    if p == 1.0 {
        return Ok(prev);
    }
    let n = tape.value(new).len();
    let mask: Vec<f64> = match rng {
        Some(rng) => {
            let keep = Bernoulli::new(p).map_err(|e| Error::invalid(e.to_string()))?;
            (0..n).map(|_| if keep.sample(rng) { 1.0 } else { 0.0 }).collect()
        }
        None => vec![p; n],
    };
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let mask = tape.constant(Tensor::vector(mask));
    let inv = tape.constant(Tensor::vector(inv));
    let a = tape.mul(mask, prev)?;
    let b = tape.mul(inv, new)?;
    tape.add(a, b)
}

/// Numerically stable mean binary cross-entropy on logits over the entries
/// where `weights` is non-zero (weights act as a mask / per-entry weight).
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let n = tape.value(logits).len();
    if targets.len() != n || weights.len() != n {
        return Err(Error::shape("bce_with_logits", format!("{n} logits, {} targets", targets.len())));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("bce over an empty mask"));
    }
    // softplus(x) − y·x
    let sp = tape.softplus(logits)?;
    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let yx = tape.mul(y, logits)?;
    let per = tape.sub(sp, yx)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let per = tape.mul(per, w)?;
    let s = tape.sum(per)?;
    tape.scale(s, 1.0 / total)
}
