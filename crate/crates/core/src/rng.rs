//! Seeded randomness helpers. Everything in the crate draws from ChaCha8
//! streams whose seeds are derived from a root seed plus a path of indices,
//! so any sub-computation can be reproduced in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from `root` and an index path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng_for(root: u64, path: &[u64]) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

pub fn standard_normal_vec(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
