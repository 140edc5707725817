//! Adaptive random-walk Metropolis in logit-transformed coordinates.
//!
//! Each bounded parameter `x in [a, b]` is sampled as `z = logit((x - a) / (b - a))`
//! and the target carries the log-Jacobian of the inverse map. During burn-in
//! the proposal covariance tracks the empirical covariance of the chain and a
//! global scale is tuned toward the target acceptance rate; both are frozen
//! afterwards so the retained draws come from a fixed Metropolis kernel.

use nalgebra::{Cholesky, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{effective_sample_size, split_r_hat};
use super::{CalibrationProblem, Diagnostics, PerParameter, PosteriorEnsemble, R_HAT_THRESHOLD};
use crate::error::{Result, TwinError};
use crate::model::PatientParameters;
use crate::seed;

const DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    /// Post-burn-in iterations per chain.
    pub samples_per_chain: usize,
    /// Share of each chain's total iterations spent adapting.
    pub burn_in_fraction: f64,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    pub target_acceptance: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl McmcConfig {
    /// 4 x 10,000 draws, 4,000 retained.
    pub fn desk(seed: u64) -> Self {
        Self {
            chains: 4,
            samples_per_chain: 10_000,
            burn_in_fraction: 0.2,
            thin: 10,
            target_acceptance: 0.23,
            seed,
        }
    }

    /// 4 x 100,000 draws, 100,000 retained.
    pub fn paper(seed: u64) -> Self {
        Self {
            samples_per_chain: 100_000,
            thin: 4,
            ..Self::desk(seed)
        }
    }

    pub fn burn_in(&self) -> usize {
        let f = self.burn_in_fraction;
        (self.samples_per_chain as f64 * f / (1.0 - f)).round() as usize
    }

    pub fn retained_per_chain(&self) -> usize {
        self.samples_per_chain / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(TwinError::InvalidConfig("need at least two chains for R-hat".into()));
        }
        if self.thin == 0 || self.retained_per_chain() < 4 {
            return Err(TwinError::InvalidConfig(format!(
                "{} draws thinned by {} leaves too few samples",
                self.samples_per_chain, self.thin
            )));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(TwinError::InvalidConfig("burn-in fraction must lie in [0, 1)".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(TwinError::InvalidConfig("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Metropolis acceptance probability for a symmetric proposal.
pub fn acceptance_probability(log_current: f64, log_proposed: f64) -> f64 {
    if log_proposed == f64::NEG_INFINITY {
        return 0.0;
    }
    (log_proposed - log_current).min(0.0).exp()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Map between bounded parameters and unconstrained coordinates.
#[derive(Debug, Clone, Copy)]
struct LogitTransform {
    lower: [f64; DIM],
    width: [f64; DIM],
}

impl LogitTransform {
    fn new(problem: &CalibrationProblem) -> Self {
        let m = problem.prior().marginals();
        let mut lower = [0.0; DIM];
        let mut width = [0.0; DIM];
        for i in 0..DIM {
            lower[i] = m[i].lower;
            width[i] = m[i].upper - m[i].lower;
        }
        Self { lower, width }
    }

    fn to_theta(&self, z: &Vector4<f64>) -> PatientParameters {
        let mut x = [0.0; DIM];
        for i in 0..DIM {
            x[i] = self.lower[i] + self.width[i] * sigmoid(z[i]);
        }
        PatientParameters::from_array(x)
    }

    fn to_z(&self, theta: &PatientParameters) -> Vector4<f64> {
        let x = theta.to_array();
        Vector4::from_fn(|i, _| {
            let s = ((x[i] - self.lower[i]) / self.width[i]).clamp(1e-12, 1.0 - 1e-12);
            (s / (1.0 - s)).ln()
        })
    }

    fn log_jacobian(&self, z: &Vector4<f64>) -> f64 {
        (0..DIM)
            .map(|i| self.width[i].ln() - softplus(-z[i]) - softplus(z[i]))
            .sum()
    }
}

struct ChainOutput {
    draws: Vec<PatientParameters>,
    acceptance: f64,
}

fn log_target(problem: &CalibrationProblem, t: &LogitTransform, z: &Vector4<f64>) -> f64 {
    let lp = problem.log_posterior(&t.to_theta(z));
    if lp.is_finite() {
        lp + t.log_jacobian(z)
    } else {
        f64::NEG_INFINITY
    }
}

/// Running mean and covariance (Welford).
struct RunningMoments {
    n: f64,
    mean: Vector4<f64>,
    m2: Matrix4<f64>,
}

impl RunningMoments {
    fn new() -> Self {
        Self {
            n: 0.0,
            mean: Vector4::zeros(),
            m2: Matrix4::zeros(),
        }
    }

    fn push(&mut self, z: &Vector4<f64>) {
        self.n += 1.0;
        let delta = z - self.mean;
        self.mean += delta / self.n;
        let delta2 = z - self.mean;
        self.m2 += delta * delta2.transpose();
    }

    fn covariance(&self) -> Matrix4<f64> {
        self.m2 / (self.n - 1.0)
    }
}

fn run_chain(problem: &CalibrationProblem, cfg: &McmcConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = seed::stream(cfg.seed, &[seed::MCMC_CHAIN, chain as u64]);
    let t = LogitTransform::new(problem);
    let burn_in = cfg.burn_in();

    // Start from a prior draw with positive posterior density.
    let mut z = Vector4::zeros();
    let mut lp = f64::NEG_INFINITY;
    for _ in 0..1000 {
        z = t.to_z(&problem.prior().sample(&mut rng));
        lp = log_target(problem, &t, &z);
        if lp.is_finite() {
            break;
        }
    }
    if !lp.is_finite() {
        return Err(TwinError::InvalidObservations(
            "no prior draw has positive posterior density".into(),
        ));
    }

    let mut chol = Matrix4::identity() * 0.5;
    let mut log_scale = (2.38 / (DIM as f64).sqrt()).ln();
    let mut moments = RunningMoments::new();
    let mut draws = Vec::with_capacity(cfg.retained_per_chain());
    let mut accepted = 0usize;

    for it in 0..burn_in + cfg.samples_per_chain {
        let xi = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let proposal = z + chol * xi * log_scale.exp();
        let lp_prop = log_target(problem, &t, &proposal);
        let a = acceptance_probability(lp, lp_prop);
        let u: f64 = rng.random();
        let accept = u < a;
        if accept {
            z = proposal;
            lp = lp_prop;
        }

        if it < burn_in {
            moments.push(&z);
            let gamma = 1.0 / ((it + 1) as f64).powf(0.6);
            log_scale += gamma * (a - cfg.target_acceptance);
            if it >= 200 && it % 50 == 0 {
                let cov = moments.covariance() + Matrix4::identity() * 1e-8;
                if let Some(c) = Cholesky::new(cov) {
                    chol = c.l();
                }
            }
        } else {
            if accept {
                accepted += 1;
            }
            let k = it - burn_in;
            if (k + 1) % cfg.thin == 0 {
                draws.push(t.to_theta(&z));
            }
        }
    }

    Ok(ChainOutput {
        draws,
        acceptance: accepted as f64 / cfg.samples_per_chain as f64,
    })
}

/// Sample the posterior of `problem` with independent chains pooled in
/// chain order. Non-convergence is reported in the diagnostics, not as an
/// error.
pub fn run_mcmc(problem: &CalibrationProblem, cfg: &McmcConfig) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    let outputs = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(problem, cfg, c))
        .collect::<Result<Vec<_>>>()?;

    let mut r_hat = [0.0; DIM];
    let mut ess = [0.0; DIM];
    for p in 0..DIM {
        let per_chain: Vec<Vec<f64>> = outputs
            .iter()
            .map(|o| o.draws.iter().map(|d| d.to_array()[p]).collect())
            .collect();
        r_hat[p] = split_r_hat(&per_chain);
        ess[p] = effective_sample_size(&per_chain);
    }
    let converged = r_hat.iter().all(|r| *r <= R_HAT_THRESHOLD);
    let diagnostics = Diagnostics {
        r_hat: PerParameter::from_array(r_hat),
        ess: PerParameter::from_array(ess),
        acceptance: outputs.iter().map(|o| o.acceptance).collect(),
        converged,
        chains: cfg.chains,
        draws_per_chain: cfg.retained_per_chain(),
    };
    let samples = outputs.into_iter().flat_map(|o| o.draws).collect();
    Ok(PosteriorEnsemble {
        samples,
        diagnostics: Some(diagnostics),
    })
}
