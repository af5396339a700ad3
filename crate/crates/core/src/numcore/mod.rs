//! Dense `f64` tensors with a reverse-mode autodiff tape, plus the layers,
//! gradient checker and optimizer built on top of it.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, Coverage, GradCheck};
pub use nn::{bce_with_logits, dropout, zoneout, Linear, LstmCell, LstmState};
pub use optim::{clip_global_norm, Adam, LrSchedule};
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{conv1d_same_values, softmax_masked_values, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Seeded random source used for every stochastic op and initialiser.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
