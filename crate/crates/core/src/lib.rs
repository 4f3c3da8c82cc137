//! Category-aware sequential recommendation with coupled and tripled
//! seq2seq translation models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`nn`]: dense tensors, a reverse-mode tape, LSTM/embedding/dropout layers.
//! * [`vae`]: per-step Gaussian latent head (split, reparameterize, KL).
//! * [`models`]: the `lstm`, `ci`, `ic`, `ici`, `ivaec`, `tstm` and `s-tstm` forward passes.
//! * [`data`]: log parsing, n-core filtering, leave-one-out splits, sliding windows.
//! * [`synth`]: Markov-chain category benchmarks with exact Bayes oracles.
//! * [`train`]: joint loss, Adam, early stopping, gradient checks, checkpoints.
//! * [`eval`]: sampled-negative Hit@n / NDCG@n and category ranking.
//! * [`cli`]: the `seqtrans` command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use models::{ParamSet, Variant};
pub use tensor::{Tape, Tensor, Var};

/// Derive an independent stream seed from a base seed and a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
