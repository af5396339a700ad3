use rand::Rng;

use crate::attention::prior::{prior_filter_taps, prior_kernel, PRIOR_LOG_FLOOR, PRIOR_LOG_THRESHOLD};
use crate::attention::{AlignmentState, AttentionConfig};
use crate::error::{Error, Result};
use crate::numcore::params::{glorot, uniform};
use crate::numcore::{dropout, Bindings, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// `𝒢(d) = V_G tanh(W_G d + b_G)` reshaped to `[n_dynamic, taps]`.
#[derive(Clone, Debug)]
pub struct DynamicGenerator {
    /// `[H, query]`
    pub w: ParamId,
    /// `[H]`
    pub b: ParamId,
    /// `[n_dynamic · taps, H]`
    pub v: ParamId,
    pub n_dynamic: usize,
    pub taps: usize,
    /// Dropout on `d` while training.
    pub input_dropout: f64,
}

/// Dynamic convolution attention:
/// `E_ij = υᵀ tanh(U f_ij + T g_ij + b) + p_ij`.
#[derive(Clone, Debug)]
pub struct DcaParams {
    /// `[A, F_static]`
    pub u: ParamId,
    /// `[A, F_dynamic]`
    pub t: ParamId,
    /// `[A]`
    pub upsilon: ParamId,
    /// `[A]`
    pub b: ParamId,
    /// `[F_static, K]`
    pub static_filters: ParamId,
    pub generator: DynamicGenerator,
    /// Fixed centred prior kernel applied to `α_{i−1}` before the log.
    pub prior_kernel: Vec<f64>,
    pub attention_dim: usize,
}

impl DcaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        query_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = cfg.attention_dim;
        let (fs, fd, k) = (cfg.dca_static_filters, cfg.dca_dynamic_filters, cfg.dca_taps);
        let taps = prior_filter_taps(cfg.prior_taps, cfg.prior_alpha, cfg.prior_beta)?;
        Ok(Self {
            u: store.add(format!("{name}.u"), glorot(rng, a, fs)),
            t: store.add(format!("{name}.t"), glorot(rng, a, fd)),
            upsilon: store.add(format!("{name}.upsilon"), uniform(rng, &[a], (3.0 / a as f64).sqrt())),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[a])),
            static_filters: store.add(format!("{name}.static_filters"), glorot(rng, fs, k)),
            generator: DynamicGenerator {
                w: store.add(format!("{name}.gen.w"), glorot(rng, a, query_dim)),
                b: store.add(format!("{name}.gen.b"), Tensor::zeros(&[a])),
                v: store.add(format!("{name}.gen.v"), glorot(rng, fd * k, a)),
                n_dynamic: fd,
                taps: k,
                input_dropout: cfg.dynamic_dropout,
            },
            prior_kernel: prior_kernel(&taps),
            attention_dim: a,
        })
    }
}

/// Dynamic filter bank for decoder state `d`. `rng` enables input dropout.
pub fn dynamic_filters(
    tape: &mut Tape,
    p: &Bindings,
    gen: &DynamicGenerator,
    d: Var,
    rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let w = p.var(gen.w);
    let width = tape.value(w).cols();
    if tape.value(d).shape() != [width] {
        return Err(Error::shape(
            "dynamic_filters",
            format!("query {:?}, generator expects [{width}]", tape.value(d).shape()),
        ));
    }
    let d = dropout(tape, d, gen.input_dropout, rng)?;
    let h = tape.matmul(w, d)?;
    let h = tape.add(h, p.var(gen.b))?;
    let h = tape.tanh(h)?;
    let flat = tape.matmul(p.var(gen.v), h)?;
    tape.reshape(flat, &[gen.n_dynamic, gen.taps])
}

/// DCA energies. Keys are never read.
pub fn dca_energies(
    tape: &mut Tape,
    p: &Bindings,
    params: &DcaParams,
    d: Var,
    state: &AlignmentState,
    rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let prev = state.prev_alignment;
    let f = tape.conv_bank(prev, p.var(params.static_filters))?;
    let bank = dynamic_filters(tape, p, &params.generator, d, rng)?;
    let g = tape.conv_bank(prev, bank)?;
    let uf = tape.matmul_t(f, p.var(params.u))?;
    let tg = tape.matmul_t(g, p.var(params.t))?;
    let pre = tape.add(uf, tg)?;
    let pre = tape.add_row(pre, p.var(params.b))?;
    let act = tape.tanh(pre)?;
    let e = tape.matmul(act, p.var(params.upsilon))?;
    let kernel = tape.constant(Tensor::vector(params.prior_kernel.clone()));
    let spread = tape.conv1d_same(prev, kernel)?;
    let prior = tape.log_clamped(spread, PRIOR_LOG_THRESHOLD, PRIOR_LOG_FLOOR)?;
    tape.add(e, prior)
}
