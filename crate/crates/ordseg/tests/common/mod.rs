// Not every test binary exercises every oracle.
#![allow(dead_code)]

//! Shared test support: independent brute-force oracles and random-instance
//! generators. Everything here recomputes the definitions from scratch with
//! naive loops; it must never call the library's loss/metric/transform
//! implementations it exists to check.

pub mod oracles;

use ndarray::{Array2, Array3};
use ordseg::model::{ClassConfig, LabelMap, ProbMap};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn usize_in(rng: &mut ChaCha8Rng, lo: usize, hi_inclusive: usize) -> usize {
    lo + (rng.next_u64() % (hi_inclusive - lo + 1) as u64) as usize
}

/// A random valid probability map (normalized positive rows).
pub fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> ProbMap {
    let mut values = Array3::zeros((h, w, k));
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            for c in 0..k {
                let v = 0.05 + uniform(rng);
                values[(i, j, c)] = v;
                sum += v;
            }
            for c in 0..k {
                values[(i, j, c)] /= sum;
            }
        }
    }
    ProbMap::new(values).expect("normalized rows are valid")
}

/// A random label map with entries in `1..=k`.
pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    let values = Array2::from_shape_fn((h, w), |_| usize_in(rng, 1, k));
    LabelMap::new(values, ClassConfig::new(k).unwrap()).expect("in-range labels")
}

/// A random boolean mask; `density` is the probability of `true`.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| uniform(rng) < density)
}
