//! Seeded random fixtures for the verification suites.

use loec_core::{ConvKernel, FeatureMap, Mask};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap<f64> {
    FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Random mask guaranteed to contain at least one pixel of each class.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let data: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
        let fg = data.iter().filter(|&&v| v).count();
        if fg > 0 && fg < h * w {
            return Mask::new(h, w, data).unwrap();
        }
    }
}

pub fn random_kernel(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> ConvKernel<f64> {
    let weights = (0..out_c * in_c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvKernel::new(out_c, in_c, k, k, stride, padding, weights).unwrap()
}

/// Central finite difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Smallest representative of `d` modulo 2*pi, in `(-pi, pi]`.
pub fn wrap_phase(d: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = d % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
