//! Truncated normal distribution `TN(mu, sigma^2, a, b)`.
//!
//! `mu` and `sigma` are the location and scale of the parent normal; the
//! support is `[lower, upper]`, where `upper` may be `+inf` and `lower` may
//! be `-inf`. Sampling is by inversion of the parent CDF restricted to the
//! support, which keeps draws exact and a pure function of the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use crate::error::{Result, TwinError};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in the lower tail.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function `1 - Phi(x)`, accurate in the upper tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of [`std_normal_cdf`].
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, lower: f64, upper: f64) -> Result<Self> {
        let tn = Self {
            mu,
            sigma,
            lower,
            upper,
        };
        tn.validate()?;
        Ok(tn)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(TwinError::InvalidDistribution(format!(
                "location must be finite, got {}",
                self.mu
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TwinError::InvalidDistribution(format!(
                "scale must be positive, got {}",
                self.sigma
            )));
        }
        if self.lower.is_nan() || self.upper.is_nan() || self.lower >= self.upper {
            return Err(TwinError::InvalidDistribution(format!(
                "need lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.mass() <= 0.0 {
            return Err(TwinError::InvalidDistribution(format!(
                "support [{}, {}] carries no probability mass",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    fn standardized_bounds(&self) -> (f64, f64) {
        (
            (self.lower - self.mu) / self.sigma,
            (self.upper - self.mu) / self.sigma,
        )
    }

    /// Parent-normal probability of the support, computed on whichever side
    /// of the mode avoids cancellation.
    pub fn mass(&self) -> f64 {
        let (a, b) = self.standardized_bounds();
        if a > 0.0 {
            std_normal_sf(a) - std_normal_sf(b)
        } else {
            std_normal_cdf(b) - std_normal_cdf(a)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - LN_SQRT_2PI - self.sigma.ln() - self.mass().ln()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        let (a, _) = self.standardized_bounds();
        let z = (x - self.mu) / self.sigma;
        let num = if a > 0.0 {
            std_normal_sf(a) - std_normal_sf(z)
        } else {
            std_normal_cdf(z) - std_normal_cdf(a)
        };
        (num / self.mass()).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        let (a, b) = self.standardized_bounds();
        let pa = if a.is_finite() { std_normal_pdf(a) } else { 0.0 };
        let pb = if b.is_finite() { std_normal_pdf(b) } else { 0.0 };
        self.mu + self.sigma * (pa - pb) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = self.standardized_bounds();
        let z = self.mass();
        let (pa, apa) = if a.is_finite() {
            (std_normal_pdf(a), a * std_normal_pdf(a))
        } else {
            (0.0, 0.0)
        };
        let (pb, bpb) = if b.is_finite() {
            (std_normal_pdf(b), b * std_normal_pdf(b))
        } else {
            (0.0, 0.0)
        };
        let r = (pa - pb) / z;
        self.sigma * self.sigma * (1.0 + (apa - bpb) / z - r * r)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Draw one value by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = self.standardized_bounds();
        let u: f64 = rng.random();
        // Invert on the side of the mode that holds the support so that the
        // probabilities being inverted stay away from 1.
        let z = if a > 0.0 {
            let (sa, sb) = (std_normal_sf(a), std_normal_sf(b));
            -std_normal_inv_cdf(sa - u * (sa - sb))
        } else {
            let (ca, cb) = (std_normal_cdf(a), std_normal_cdf(b));
            std_normal_inv_cdf(ca + u * (cb - ca))
        };
        (self.mu + self.sigma * z).clamp(self.lower, self.upper)
    }
}
