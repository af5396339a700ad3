use rand::Rng;

use crate::attention::{AlignmentState, AttentionConfig};
use crate::error::Result;
use crate::numcore::params::{glorot, uniform};
use crate::numcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

/// Location-sensitive attention:
/// `E_ij = υᵀ tanh(W d_i + V h_j + U f_ij + b)` with `f = ℱ ∗ α_{i−1}`.
#[derive(Clone, Debug)]
pub struct LsaParams {
    /// `[A, query]`
    pub w: ParamId,
    /// `[A, key]`
    pub v: ParamId,
    /// `[A, F]`
    pub u: ParamId,
    /// `[A]`
    pub upsilon: ParamId,
    /// `[A]`
    pub b: ParamId,
    /// `[F, K]`, K odd
    pub filters: ParamId,
    pub attention_dim: usize,
}

impl LsaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        query_dim: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let a = cfg.attention_dim;
        let (f, k) = (cfg.lsa_filters, cfg.lsa_taps);
        Self {
            w: store.add(format!("{name}.w"), glorot(rng, a, query_dim)),
            v: store.add(format!("{name}.v"), glorot(rng, a, key_dim)),
            u: store.add(format!("{name}.u"), glorot(rng, a, f)),
            upsilon: store.add(format!("{name}.upsilon"), uniform(rng, &[a], (3.0 / a as f64).sqrt())),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[a])),
            filters: store.add(format!("{name}.filters"), glorot(rng, f, k)),
            attention_dim: a,
        }
    }

    /// `V h_j` for every key row, `[L, A]`.
    pub fn project_keys(&self, tape: &mut Tape, p: &Bindings, keys: Var) -> Result<Var> {
        tape.matmul_t(keys, p.var(self.v))
    }
}

/// LSA energies given keys already projected by [`LsaParams::project_keys`].
pub fn lsa_energies(
    tape: &mut Tape,
    p: &Bindings,
    params: &LsaParams,
    d: Var,
    projected_keys: Var,
    state: &AlignmentState,
) -> Result<Var> {
    let wd = tape.matmul(p.var(params.w), d)?;
    let wd_b = tape.add(wd, p.var(params.b))?;
    let f = tape.conv_bank(state.prev_alignment, p.var(params.filters))?;
    let uf = tape.matmul_t(f, p.var(params.u))?;
    let pre = tape.add(projected_keys, uf)?;
    let pre = tape.add_row(pre, wd_b)?;
    let act = tape.tanh(pre)?;
    tape.matmul(act, p.var(params.upsilon))
}
