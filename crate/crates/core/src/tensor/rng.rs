//! Seeded random streams, split by name so that every parameter's
//! initialization depends only on `(seed, name)`.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

/// Derives an independent stream for `name` from `seed` (FNV-1a over the name, then SplitMix64).
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::seed_from_u64(splitmix(seed ^ splitmix(h)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Gaussian tensor drawn from the `(seed, name)` stream.
pub fn normal_named<T: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    normal(&mut stream(seed, name), shape, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Tensor<f64> = normal_named(7, "layer.0.attn.wq.weight", &[3, 3], 1.0);
        let b: Tensor<f64> = normal_named(7, "layer.0.attn.wq.weight", &[3, 3], 1.0);
        let c: Tensor<f64> = normal_named(7, "layer.0.attn.wk.weight", &[3, 3], 1.0);
        let d: Tensor<f64> = normal_named(8, "layer.0.attn.wq.weight", &[3, 3], 1.0);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(!a.bit_eq(&d));
    }
}
