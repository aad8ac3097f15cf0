use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discretized Gaussian over severity levels `1..=levels`.
///
/// The density `exp(-(i - mu)^2 / (2 sigma^2))` is evaluated at each integer
/// level and renormalized, giving a categorical distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSampler {
    pub mu: f64,
    pub sigma: f64,
    pub levels: u8,
}

impl Default for LevelSampler {
    fn default() -> Self {
        Self {
            mu: 3.0,
            sigma: 1.0,
            levels: 5,
        }
    }
}

impl LevelSampler {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        let s = Self {
            mu,
            sigma,
            levels: 5,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be finite, got {}", self.mu)));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        Ok(())
    }

    /// Probability of each level, index 0 holding level 1.
    pub fn distribution(&self) -> Vec<f64> {
        let two_var = 2.0 * self.sigma * self.sigma;
        let w: Vec<f64> = (1..=self.levels)
            .map(|i| {
                let d = i as f64 - self.mu;
                (-(d * d) / two_var).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter().map(|v| v / total).collect()
        } else {
            // every level underflowed: all mass on the level nearest mu
            let nearest = (self.mu.round().clamp(1.0, self.levels as f64) as usize) - 1;
            (0..self.levels as usize).map(|i| if i == nearest { 1.0 } else { 0.0 }).collect()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        let p = self.distribution();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i as u8 + 1;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0) as u8 + 1
    }
}
