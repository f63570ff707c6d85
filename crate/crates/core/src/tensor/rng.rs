//! Seeded, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by an
//! explicit `(seed, label)` pair, so parameter initialisation does not depend
//! on the order in which modules are constructed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn stream labels into keys.
fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for `key` under `seed`.
pub fn split(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key))
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(split(seed, label_key(label)))
}

/// Stream addressed by a label plus integer coordinates (e.g. epoch, index).
pub fn stream_at(seed: u64, label: &str, coords: &[u64]) -> StreamRng {
    let s = coords
        .iter()
        .fold(split(seed, label_key(label)), |acc, &c| split(acc, c));
    ChaCha8Rng::seed_from_u64(s)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// He initialisation for a weight with the given fan-in.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = normal(&mut stream(7, "w1"), &[8], 1.0);
        let b = normal(&mut stream(7, "w1"), &[8], 1.0);
        let c = normal(&mut stream(7, "w2"), &[8], 1.0);
        let d = normal(&mut stream(8, "w1"), &[8], 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn coordinates_split_streams() {
        let mut a = stream_at(1, "clip", &[0, 5]);
        let mut b = stream_at(1, "clip", &[5, 0]);
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }
}
