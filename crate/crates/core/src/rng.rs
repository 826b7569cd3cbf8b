//! Seeded random streams.
//!
//! Each stream is a ChaCha8 keystream selected by `(seed, stream)`, so batch
//! drivers can hand run `k` its own independent sequence. Normal variates
//! use the Box–Muller transform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng, spare: None }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Draws independent zero-mean normals with the given standard deviations.
/// Components with zero deviation are exactly zero.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    stream: Stream,
    sigma: Vec<f64>,
}

impl GaussianSampler {
    pub fn new(seed: u64, stream: u64, sigma: &[f64]) -> Self {
        GaussianSampler {
            stream: Stream::new(seed, stream),
            sigma: sigma.to_vec(),
        }
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let mut out = vec![0.0; self.sigma.len()];
        self.fill(&mut out);
        out
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.sigma) {
            let z = self.stream.standard_normal();
            *o = if *s == 0.0 { 0.0 } else { s * z };
        }
    }
}

/// Sampler for the mechanism: deterministic stream per seed.
pub fn gaussian_sampler(seed: u64, sigma: &[f64]) -> GaussianSampler {
    GaussianSampler::new(seed, 0, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_zero() {
        let mut s = gaussian_sampler(3, &[0.0, 0.0]);
        for _ in 0..10 {
            assert_eq!(s.sample(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn deterministic_per_seed_and_stream() {
        let a = GaussianSampler::new(9, 4, &[1.0; 3]).sample();
        let b = GaussianSampler::new(9, 4, &[1.0; 3]).sample();
        let c = GaussianSampler::new(9, 5, &[1.0; 3]).sample();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_at_one_million_draws() {
        let sigma = [0.5, 2.0];
        let mut s = gaussian_sampler(11, &sigma);
        let n = 1_000_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let v = s.sample();
            for k in 0..2 {
                sum[k] += v[k];
                sq[k] += v[k] * v[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 4.0 * sigma[k] / 1000.0, "mean {mean}");
            assert!((sd / sigma[k] - 1.0).abs() < 0.01, "sd {sd}");
        }
    }
}
