use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Real, Tensor};

/// The one RNG type threaded through every stochastic op.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, index)`; used for per-scene and
/// per-example randomness so results do not depend on worker count.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> Rng {
    let s = splitmix64(splitmix64(seed ^ splitmix64(purpose)) ^ index);
    rng_from_seed(s)
}

pub fn standard_normal<F: Real>(rng: &mut Rng) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::from_f64c(z)
}

pub fn gaussian<F: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| standard_normal(rng))
}
