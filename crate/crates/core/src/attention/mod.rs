//! Energy-based attention over encoder states.
//!
//! Two mechanisms share one interface: location-sensitive attention (LSA),
//! which mixes content and location terms, and dynamic convolution attention
//! (DCA), which is purely location-relative and never reads the keys when
//! computing energies.

mod dca;
mod lsa;
mod prior;

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, SeededRng, Tape, Tensor, Var, Bindings};

pub use dca::{dca_energies, dynamic_filters, DcaParams, DynamicGenerator};
pub use lsa::{lsa_energies, LsaParams};
pub use prior::{apply_prior, prior_filter_taps, prior_kernel, prior_mean, PRIOR_LOG_FLOOR, PRIOR_LOG_THRESHOLD};

/// Recurrent attention state: the previous alignment `α_{i−1}` and which
/// encoder positions are real.
#[derive(Clone, Debug)]
pub struct AlignmentState {
    pub prev_alignment: Var,
    pub mask: Arc<[bool]>,
}

impl AlignmentState {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Checks the probability-vector invariants against the tape values.
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let a = tape.data(self.prev_alignment);
        if a.len() != self.mask.len() {
            return Err(Error::shape("alignment_state", format!("{} weights, {} mask", a.len(), self.mask.len())));
        }
        let sum: f64 = a.iter().sum();
        let bad_mask = a.iter().zip(self.mask.iter()).any(|(&w, &m)| !m && w != 0.0);
        if a.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 || bad_mask {
            return Err(Error::invalid("alignment is not a masked probability vector"));
        }
        Ok(())
    }
}

/// One-hot alignment at position 0 over `len` unmasked positions.
pub fn init_alignment(tape: &mut Tape, len: usize) -> Result<AlignmentState> {
    init_alignment_masked(tape, vec![true; len].into())
}

/// One-hot alignment at position 0; position 0 must be unmasked.
pub fn init_alignment_masked(tape: &mut Tape, mask: Arc<[bool]>) -> Result<AlignmentState> {
    if mask.is_empty() {
        return Err(Error::invalid("alignment over zero encoder positions"));
    }
    if !mask[0] {
        return Err(Error::invalid("first encoder position is masked"));
    }
    let mut a = vec![0.0; mask.len()];
    a[0] = 1.0;
    Ok(AlignmentState {
        prev_alignment: tape.constant(Tensor::vector(a)),
        mask,
    })
}

/// Result of one attention step.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub alignment: Var,
    pub context: Var,
    pub energies: Var,
    /// State for the next step, holding `alignment`.
    pub state: AlignmentState,
}

/// Masked softmax of `energies` and the weighted key average.
pub fn attend(tape: &mut Tape, energies: Var, keys: Var, state: &AlignmentState) -> Result<AttentionOutput> {
    let l = tape.value(energies).len();
    if l != state.len() || tape.value(keys).rows() != l {
        return Err(Error::shape(
            "attend",
            format!("{l} energies, {} keys, mask {}", tape.value(keys).rows(), state.len()),
        ));
    }
    let alignment = tape.softmax_masked(energies, &state.mask)?;
    let context = tape.vecmat(alignment, keys)?;
    Ok(AttentionOutput {
        alignment,
        context,
        energies,
        state: AlignmentState {
            prev_alignment: alignment,
            mask: state.mask.clone(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Lsa,
    Dca,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Lsa => "lsa",
            AttentionKind::Dca => "dca",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsa" => Ok(AttentionKind::Lsa),
            "dca" => Ok(AttentionKind::Dca),
            _ => Err(Error::invalid(format!("unknown attention kind `{s}`"))),
        }
    }
}

/// Sizes and fixed hyperparameters of an attention mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub attention_dim: usize,
    pub lsa_filters: usize,
    pub lsa_taps: usize,
    pub dca_static_filters: usize,
    pub dca_dynamic_filters: usize,
    pub dca_taps: usize,
    pub prior_taps: usize,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    /// Dropout on the dynamic-filter generator input while training.
    pub dynamic_dropout: f64,
}

impl AttentionConfig {
    pub fn lsa(attention_dim: usize) -> Self {
        Self {
            kind: AttentionKind::Lsa,
            ..Self::dca(attention_dim)
        }
    }

    pub fn dca(attention_dim: usize) -> Self {
        Self {
            kind: AttentionKind::Dca,
            attention_dim,
            lsa_filters: 32,
            lsa_taps: 31,
            dca_static_filters: 8,
            dca_dynamic_filters: 8,
            dca_taps: 21,
            prior_taps: 11,
            prior_alpha: 0.1,
            prior_beta: 0.9,
            dynamic_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize, what: &str| {
            if k % 2 == 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be odd, got {k}")))
            }
        };
        if self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be positive".into()));
        }
        match self.kind {
            AttentionKind::Lsa => odd(self.lsa_taps, "lsa_taps")?,
            AttentionKind::Dca => odd(self.dca_taps, "dca_taps")?,
        }
        if !(0.0..1.0).contains(&self.dynamic_dropout) {
            return Err(Error::Config(format!("dynamic_dropout {} outside [0, 1)", self.dynamic_dropout)));
        }
        prior_filter_taps(self.prior_taps, self.prior_alpha, self.prior_beta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Either attention mechanism with its parameters registered in a store.
#[derive(Clone, Debug)]
pub enum Attention {
    Lsa(LsaParams),
    Dca(DcaParams),
}

/// Per-utterance key data reused across decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct PreparedKeys {
    pub keys: Var,
    /// `V h_j` for LSA; absent for DCA.
    pub projected: Option<Var>,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        query_dim: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            AttentionKind::Lsa => Attention::Lsa(LsaParams::new(store, name, cfg, query_dim, key_dim, rng)),
            AttentionKind::Dca => Attention::Dca(DcaParams::new(store, name, cfg, query_dim, rng)?),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::Lsa(_) => AttentionKind::Lsa,
            Attention::Dca(_) => AttentionKind::Dca,
        }
    }

    pub fn prepare(&self, tape: &mut Tape, p: &Bindings, keys: Var) -> Result<PreparedKeys> {
        let projected = match self {
            Attention::Lsa(lsa) => Some(lsa.project_keys(tape, p, keys)?),
            Attention::Dca(_) => None,
        };
        Ok(PreparedKeys { keys, projected })
    }

    /// Energies for query `d`. `rng` enables training-mode dropout.
    pub fn energies(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        d: Var,
        keys: &PreparedKeys,
        state: &AlignmentState,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        match self {
            Attention::Lsa(lsa) => {
                let projected = keys
                    .projected
                    .ok_or_else(|| Error::invalid("LSA keys were not prepared"))?;
                lsa_energies(tape, p, lsa, d, projected, state)
            }
            Attention::Dca(dca) => dca_energies(tape, p, dca, d, state, rng),
        }
    }

    /// Energies followed by [`attend`].
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        d: Var,
        keys: &PreparedKeys,
        state: &AlignmentState,
        rng: Option<&mut SeededRng>,
    ) -> Result<AttentionOutput> {
        let e = self.energies(tape, p, d, keys, state, rng)?;
        attend(tape, e, keys.keys, state)
    }
}
