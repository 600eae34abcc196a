//! Conditional adversarial image-to-image translation from RGB images to
//! tissue oxygen saturation (StO₂) maps.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor core
//! ([`tensor`]), a U-Net generator and PatchGAN discriminator built on it
//! ([`nn`]), the adversarial plus weighted-L1 objective and alternating
//! training loop ([`objective`]), sliding-window augmentation and a synthetic
//! Beer–Lambert data source ([`data`]), and the inter-case / intra-case
//! evaluation protocols with an ablation sweep ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Derives an independent seed for a named sub-stream of a run seed
/// (splitmix64 finalizer over the pair).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(seed.wrapping_add(mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}
