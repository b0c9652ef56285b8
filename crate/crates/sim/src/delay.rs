//! Per-link delay with autoregressive jitter:
//! `delay_i = base * (1 + variation * n_i)`,
//! `n_i = correlation * n_{i-1} + (1 - correlation) * u_i`, `u_i ~ U[-1, 1]`.
//! `|n_i| <= 1`, so delays stay within `base * (1 +- variation)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct LinkDelay {
    base_us: f64,
    variation: f64,
    correlation: f64,
    prev: f64,
    rng: ChaCha8Rng,
}

impl LinkDelay {
    pub fn new(base_ms: f64, variation: f64, correlation: f64, seed: u64) -> Self {
        LinkDelay {
            base_us: base_ms * 1000.0,
            variation: variation.clamp(0.0, 1.0),
            correlation: correlation.clamp(0.0, 1.0),
            prev: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Changes the parameters, keeping the jitter state.
    pub fn set(&mut self, base_ms: f64, variation: f64, correlation: f64) {
        self.base_us = base_ms * 1000.0;
        self.variation = variation.clamp(0.0, 1.0);
        self.correlation = correlation.clamp(0.0, 1.0);
    }

    pub fn base_us(&self) -> f64 {
        self.base_us
    }

    /// Largest delay this link can currently produce.
    pub fn max_us(&self) -> u64 {
        (self.base_us * (1.0 + self.variation)).ceil() as u64
    }

    pub fn next_us(&mut self) -> u64 {
        let u: f64 = self.rng.gen_range(-1.0..=1.0);
        self.prev = self.correlation * self.prev + (1.0 - self.correlation) * u;
        (self.base_us * (1.0 + self.variation * self.prev)).max(0.0).round() as u64
    }
}
