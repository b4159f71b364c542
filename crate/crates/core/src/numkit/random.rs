//! Seeded random streams and the samplers the crate needs.
//!
//! Streams are ChaCha8 generators. [`RngStream::derive`] gives independent
//! child streams keyed by an index, which is how parallel workers get their
//! randomness without depending on scheduling order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, Gamma, LogNormal, Normal, Poisson, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("invalid {distribution} parameter: {detail}")]
    InvalidParameter { distribution: &'static str, detail: String },
}

fn invalid(distribution: &'static str, detail: String) -> SampleError {
    SampleError::InvalidParameter { distribution, detail }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream number `stream` under the same seed.
    pub fn derive(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.rng.random::<bool>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> Result<f64, SampleError> {
        let d = Normal::new(mean, sd).map_err(|e| invalid("normal", e.to_string()))?;
        if !(sd >= 0.0) {
            return Err(invalid("normal", format!("sd = {sd}")));
        }
        Ok(d.sample(&mut self.rng))
    }

    /// Log-normal with log-scale mean `mu` and log-scale sd `sigma`.
    pub fn lognormal(&mut self, mu: f64, sigma: f64) -> Result<f64, SampleError> {
        if !(sigma > 0.0) {
            return Err(invalid("lognormal", format!("sigma = {sigma}")));
        }
        let d = LogNormal::new(mu, sigma).map_err(|e| invalid("lognormal", e.to_string()))?;
        Ok(d.sample(&mut self.rng))
    }

    pub fn exponential(&mut self, rate: f64) -> Result<f64, SampleError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(invalid("exponential", format!("rate = {rate}")));
        }
        let d = Exp::new(rate).map_err(|e| invalid("exponential", e.to_string()))?;
        Ok(d.sample(&mut self.rng))
    }

    pub fn standard_exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.rng)
    }

    /// Gamma with shape `shape` and rate `rate` (mean shape/rate).
    pub fn gamma(&mut self, shape: f64, rate: f64) -> Result<f64, SampleError> {
        if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
            return Err(invalid("gamma", format!("shape = {shape}, rate = {rate}")));
        }
        let d = Gamma::new(shape, 1.0 / rate).map_err(|e| invalid("gamma", e.to_string()))?;
        Ok(d.sample(&mut self.rng))
    }

    pub fn poisson_count(&mut self, mean: f64) -> Result<u64, SampleError> {
        if mean == 0.0 {
            return Ok(0);
        }
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(invalid("poisson", format!("mean = {mean}")));
        }
        let d = Poisson::new(mean).map_err(|e| invalid("poisson", e.to_string()))?;
        Ok(d.sample(&mut self.rng) as u64)
    }

    /// PG(1, c) draw from the Gamma series truncated at `terms` terms.
    pub fn polya_gamma_truncated(&mut self, c: f64, terms: usize) -> f64 {
        let c2 = c * c / (4.0 * PI * PI);
        let mut acc = 0.0;
        for k in 1..=terms {
            let h = k as f64 - 0.5;
            acc += self.standard_exponential() / (h * h + c2);
        }
        acc / (2.0 * PI * PI)
    }
}
