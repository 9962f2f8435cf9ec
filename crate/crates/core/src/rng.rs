//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own PCG-XSL-RR 128/64
//! generator (`rand_pcg::Pcg64`). A stream is identified by a `(seed, label)`
//! pair: the seed becomes the generator state and the label is hashed with
//! 64-bit FNV-1a into the PCG stream selector. Parameters therefore get the
//! same values no matter in which order they are initialized, and results do
//! not depend on the host platform.

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

use crate::scalar::Scalar;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const STATE_MIX: u128 = 0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c834;

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Generator for the named stream under `seed`.
pub fn stream(seed: u64, label: &str) -> Pcg64 {
    Pcg64::new(u128::from(seed) ^ STATE_MIX, u128::from(fnv1a(label)))
}

/// Normal(0, std²) samples truncated to ±2·std by rejection.
pub fn truncated_normal<T: Scalar>(rng: &mut Pcg64, n: usize, std: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            out.push(T::lit(z * std));
        }
    }
    out
}

/// Plain Normal(0, std²) samples.
pub fn normal<T: Scalar>(rng: &mut Pcg64, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform(rng: &mut Pcg64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
