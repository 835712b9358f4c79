//! Dense tensors and reverse-mode differentiation over the op set the model uses.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamStore, Parameter};
pub(crate) use tape::batch_seq_dim;
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Seeded generator used for dropout masks, shuffling and initialization.
///
/// ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded through
/// `SeedableRng::seed_from_u64`.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
