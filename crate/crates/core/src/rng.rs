//! Named random substreams derived from a single seed.
//!
//! Every consumer of randomness asks for `substream(seed, name, index)`; the
//! stream seed is the first eight bytes of SHA-256 over the three inputs, so
//! streams never overlap and adding a new consumer does not perturb others.

use crate::autograd::{lit, Scalar, Tensor};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name, index))
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_shape_simple_fn(IxDyn(shape), || lit(rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_shape_simple_fn(IxDyn(shape), || lit(rng.random_range(lo..hi)))
}
