//! Seeded random streams.
//!
//! All randomness goes through [`Rng`], a ChaCha8 stream keyed by a 64-bit
//! seed. Independent streams for a given layer and purpose are derived with
//! [`sub_seed`], so parallel or reordered execution draws identical values.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Name of the generator behind [`Rng`], recorded in run manifests.
pub const RNG_ALGORITHM: &str = "chacha8";

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the purpose tag.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives the seed of the stream owned by (`index`, `purpose`) under `master`.
///
/// `seed = mix(mix(mix(master) ^ index) ^ fnv1a(purpose))`.
pub fn sub_seed(master: u64, index: u64, purpose: &str) -> u64 {
    mix64(mix64(mix64(master) ^ index) ^ tag_hash(purpose))
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for (`index`, `purpose`) under `master`; see [`sub_seed`].
    pub fn derive(master: u64, index: u64, purpose: &str) -> Self {
        Self::new(sub_seed(master, index, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One uniform draw from `[lo, hi)` in f64.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// `length x 1` column of i.i.d. `U[lo, hi)` values.
pub fn uniform_vector(rng: &mut Rng, length: usize, lo: f32, hi: f32) -> Result<Tensor2D> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform range requires lo < hi, got [{lo}, {hi})"
        )));
    }
    let dist = Uniform::new(lo, hi);
    let values = (0..length).map(|_| dist.sample(rng)).collect();
    Ok(Tensor2D::from_parts(length, 1, values))
}

/// `rows x cols` tensor of `N(0, std^2)` values.
pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f32) -> Tensor2D {
    let values = (0..rows * cols)
        .map(|_| (rng.standard_normal() * std as f64) as f32)
        .collect();
    Tensor2D::from_parts(rows, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_vector() {
        let a = uniform_vector(&mut Rng::new(7), 100, -1.0, 1.0).unwrap();
        let b = uniform_vector(&mut Rng::new(7), 100, -1.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c = uniform_vector(&mut Rng::new(8), 100, -1.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn values_within_half_open_range() {
        let v = uniform_vector(&mut Rng::new(1), 100_000, -0.25, 0.5).unwrap();
        assert!(v.data().iter().all(|&x| (-0.25..0.5).contains(&x)));
    }

    #[test]
    fn rejects_empty_range() {
        assert!(uniform_vector(&mut Rng::new(1), 3, 1.0, 1.0).is_err());
        assert!(uniform_vector(&mut Rng::new(1), 3, 2.0, 1.0).is_err());
    }

    #[test]
    fn million_sample_mean_within_three_sigma() {
        // sigma_mean = (2 / sqrt(12)) / 1000 ~= 5.8e-4; 3 sigma ~= 0.0017 < 0.004
        let v = uniform_vector(&mut Rng::new(2024), 1_000_000, -1.0, 1.0).unwrap();
        let mean: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.004, "mean {mean}");
    }

    #[test]
    fn kolmogorov_smirnov_against_uniform_cdf() {
        let v = uniform_vector(&mut Rng::new(99), 1_000_000, -1.0, 1.0).unwrap();
        let mut xs: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn sub_seeds_separate_streams() {
        let a = sub_seed(1, 0, "noise");
        assert_eq!(a, sub_seed(1, 0, "noise"));
        assert_ne!(a, sub_seed(1, 1, "noise"));
        assert_ne!(a, sub_seed(1, 0, "data"));
        assert_ne!(a, sub_seed(2, 0, "noise"));
    }
}
