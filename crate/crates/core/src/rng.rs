//! Deterministic per-path random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The RNG for path `index` under `seed`. Streams for distinct indices are
/// independent and each is a pure function of `(seed, index)`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// An auxiliary stream that never collides with the path streams; used for
/// draws (bootstrap, collocation sampling) that must not perturb path noise.
pub fn aux_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(u64::MAX - tag);
    rng
}

#[inline]
pub fn fill_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    for z in out.iter_mut() {
        *z = StandardNormal.sample(rng);
    }
}
