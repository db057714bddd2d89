//! Self-correcting encoding for robust sequence-to-sequence translation.
//!
//! The pipeline: synthesize noisy sources from clean ones while recording the
//! exact inverse edit trace ([`noise`]), turn traces into per-round
//! deletion/insertion supervision ([`editsup`]), jointly train a small
//! encoder-decoder translator whose encoder carries a deletion predictor and
//! an insertion predictor ([`model`], [`training`]), then decode either
//! end-to-end or by iteratively editing the input to a fixpoint before
//! translating ([`inference`]). [`eval`] scores translation quality and edit
//! accuracy.
//!
//! Core math ([`numerics`], [`model`]) is generic over the scalar type via
//! `num-traits`; the aliases below pin the default f32 precision used by the
//! training pipeline.

pub mod editsup;
pub mod eval;
pub mod inference;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod textops;
pub mod training;

pub mod cli;

pub use numerics::Scalar;

/// Default-precision tensor.
pub type Tensor = numerics::Tensor<f32>;
/// Default-precision computation graph.
pub type Graph = numerics::Graph<f32>;
/// Default-precision optimizer state.
pub type Adam = numerics::Adam<f32>;
/// Default-precision model.
pub type Model = model::SecocoModel<f32>;

/// Double-precision tensor, used by oracle-style checks.
pub type Tensor64 = numerics::Tensor<f64>;
/// Double-precision computation graph.
pub type Graph64 = numerics::Graph<f64>;

/// Derives a subsystem seed from the run seed. splitmix64 finalizer over the
/// base seed, a stream tag, and an index; stable across platforms and runs.
pub fn split_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut z = base;
    for &b in stream.as_bytes() {
        z = mix64(z ^ (b as u64));
    }
    mix64(z ^ index)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
