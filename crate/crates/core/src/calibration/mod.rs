//! Two-step Bayesian calibration of the digital state.
//!
//! Step one turns the post-surgery observation into a truncated-normal
//! prior on the initial burden. Step two samples the joint posterior of all
//! four parameters given the pre-RT and mid-RT observations.

mod diagnostics;
mod mcmc;

pub use diagnostics::{effective_sample_size, split_r_hat};
pub use mcmc::{acceptance_probability, run_mcmc, McmcConfig};

use serde::{Deserialize, Serialize};

use crate::cohort::{ObservationSet, PriorSpec};
use crate::error::{Result, TwinError};
use crate::model::{CompiledRegimen, FixedParameters, PatientParameters, SimulationGrid, TreatmentRegimen};
use crate::truncnorm::TruncatedNormal;

/// R-hat above which a parameter is reported as not converged.
pub const R_HAT_THRESHOLD: f64 = 1.05;

/// One value per uncertain parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerParameter {
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "N_initial")]
    pub n_initial: f64,
    #[serde(rename = "alpha_RT")]
    pub alpha_rt: f64,
}

impl PerParameter {
    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            rho: v[0],
            k: v[1],
            n_initial: v[2],
            alpha_rt: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.rho, self.k, self.n_initial, self.alpha_rt]
    }
}

/// Sampler health.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r_hat: PerParameter,
    pub ess: PerParameter,
    /// Post-burn-in acceptance rate of each chain.
    pub acceptance: Vec<f64>,
    /// False when any R-hat exceeds [`R_HAT_THRESHOLD`].
    pub converged: bool,
    pub chains: usize,
    pub draws_per_chain: usize,
}

/// Equal-weight posterior draws of the digital state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble {
    /// Each sample is `[rho, K, N_initial, alpha_RT]`.
    #[serde(with = "sample_arrays")]
    pub samples: Vec<PatientParameters>,
    pub diagnostics: Option<Diagnostics>,
}

mod sample_arrays {
    use super::PatientParameters;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(samples: &[PatientParameters], s: S) -> Result<S::Ok, S::Error> {
        let arrays: Vec<[f64; 4]> = samples.iter().map(|t| t.to_array()).collect();
        arrays.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PatientParameters>, D::Error> {
        let arrays = Vec::<[f64; 4]>::deserialize(d)?;
        Ok(arrays.into_iter().map(PatientParameters::from_array).collect())
    }
}

impl PosteriorEnsemble {
    pub fn from_samples(samples: Vec<PatientParameters>) -> Self {
        Self {
            samples,
            diagnostics: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_converged(&self) -> bool {
        self.diagnostics.as_ref().is_none_or(|d| d.converged)
    }

    pub fn mean(&self) -> PerParameter {
        let n = self.samples.len() as f64;
        let mut m = [0.0; 4];
        for s in &self.samples {
            for (acc, v) in m.iter_mut().zip(s.to_array()) {
                *acc += v / n;
            }
        }
        PerParameter::from_array(m)
    }

    pub fn variance(&self) -> PerParameter {
        let mean = self.mean().to_array();
        let n = self.samples.len() as f64;
        let mut v = [0.0; 4];
        for s in &self.samples {
            for ((acc, x), mu) in v.iter_mut().zip(s.to_array()).zip(mean) {
                *acc += (x - mu).powi(2) / (n - 1.0).max(1.0);
            }
        }
        PerParameter::from_array(v)
    }
}

/// Likelihood settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    /// Observation noise scale, cells.
    pub sigma: f64,
    /// Day of the observation that informs the initial burden.
    pub initial_day: f64,
    /// Days assimilated by the sampler.
    pub assimilated_days: Vec<f64>,
}

impl Default for LikelihoodSpec {
    fn default() -> Self {
        Self {
            sigma: 2e9,
            initial_day: 0.0,
            assimilated_days: vec![20.0, 27.0],
        }
    }
}

/// Step one: `N_initial ~ TN(o, sigma^2, max(0, o - 2 sigma), o + 2 sigma)`.
pub fn step1_update_initial_burden(o_day0: f64, sigma: f64) -> Result<TruncatedNormal> {
    if !(o_day0 >= 0.0 && o_day0.is_finite()) {
        return Err(TwinError::InvalidObservations(format!(
            "initial observation must be nonnegative, got {o_day0}"
        )));
    }
    TruncatedNormal::new(o_day0, sigma, (o_day0 - 2.0 * sigma).max(0.0), o_day0 + 2.0 * sigma)
}

/// Population prior with the initial-burden marginal replaced by the step
/// one update. Its support is intersected with the population bounds so
/// every posterior draw stays inside them; if the two are disjoint the
/// population bounds are used with the updated location and scale.
pub fn effective_prior(prior: &PriorSpec, step1: &TruncatedNormal) -> Result<PriorSpec> {
    let pop = prior.n_initial;
    let lower = step1.lower.max(pop.lower);
    let upper = step1.upper.min(pop.upper);
    let n_initial = if lower < upper {
        TruncatedNormal::new(step1.mu, step1.sigma, lower, upper)?
    } else {
        TruncatedNormal::new(step1.mu, step1.sigma, pop.lower, pop.upper)?
    };
    Ok(PriorSpec { n_initial, ..*prior })
}

/// The posterior targeted by the sampler.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    prior: PriorSpec,
    observations: ObservationSet,
    sigma: f64,
    fixed: FixedParameters,
    compiled: CompiledRegimen,
    obs_indices: Vec<usize>,
}

impl CalibrationProblem {
    /// Posterior from `prior` and the given observations, simulated under
    /// the standard-of-care schedule. An empty observation set gives the
    /// prior itself.
    pub fn new(
        prior: PriorSpec,
        observations: ObservationSet,
        sigma: f64,
        fixed: FixedParameters,
        grid: SimulationGrid,
    ) -> Result<Self> {
        prior.validate()?;
        observations.validate()?;
        fixed.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TwinError::InvalidConfig(format!("noise scale must be positive, got {sigma}")));
        }
        let compiled = CompiledRegimen::new(&TreatmentRegimen::standard_of_care(), &grid)?;
        let spd = compiled.steps_per_day() as f64;
        let obs_indices = observations
            .entries
            .iter()
            .map(|e| {
                let idx = e.t * spd;
                if idx.fract() != 0.0 || e.t < 0.0 || e.t > grid.t_end {
                    Err(TwinError::InvalidObservations(format!("day {} is not on the grid", e.t)))
                } else {
                    Ok(idx as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prior,
            observations,
            sigma,
            fixed,
            compiled,
            obs_indices,
        })
    }

    /// Both steps: update the initial burden from its observation, then
    /// assimilate `spec.assimilated_days`.
    pub fn two_step(
        observations: &ObservationSet,
        prior: &PriorSpec,
        spec: &LikelihoodSpec,
        fixed: FixedParameters,
        grid: SimulationGrid,
    ) -> Result<Self> {
        let o0 = observations.at(spec.initial_day).ok_or_else(|| {
            TwinError::InvalidObservations(format!("no observation on day {}", spec.initial_day))
        })?;
        for day in &spec.assimilated_days {
            if observations.at(*day).is_none() {
                return Err(TwinError::InvalidObservations(format!("no observation on day {day}")));
            }
        }
        let step1 = step1_update_initial_burden(o0, spec.sigma)?;
        let eff = effective_prior(prior, &step1)?;
        Self::new(eff, observations.subset(&spec.assimilated_days), spec.sigma, fixed, grid)
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    /// Log density of the observations given `theta`: each residual
    /// `o - N(t)` scored under `TN(0, sigma^2, -N(t), inf)`.
    pub fn log_likelihood(&self, theta: &PatientParameters) -> f64 {
        let Some(&last) = self.obs_indices.last() else {
            return 0.0;
        };
        let mut model = Vec::with_capacity(self.obs_indices.len());
        let mut next = 0;
        self.compiled.integrate(theta, &self.fixed, 0, theta.n_initial, |i, n| {
            while next < self.obs_indices.len() && self.obs_indices[next] == i {
                model.push(n);
                next += 1;
            }
            i < last
        });
        self.observations
            .entries
            .iter()
            .zip(model)
            .map(|(e, n)| match TruncatedNormal::new(0.0, self.sigma, -n, f64::INFINITY) {
                Ok(noise) => noise.ln_pdf(e.o - n),
                Err(_) => f64::NEG_INFINITY,
            })
            .sum()
    }

    /// Unnormalized log posterior; `-inf` outside the prior support.
    pub fn log_posterior(&self, theta: &PatientParameters) -> f64 {
        if !self.prior.contains(theta) {
            return f64::NEG_INFINITY;
        }
        let lp = self.prior.ln_density(theta);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp + self.log_likelihood(theta)
    }
}

/// Step one, step two and sampling in one call.
pub fn calibrate(
    observations: &ObservationSet,
    prior: &PriorSpec,
    spec: &LikelihoodSpec,
    fixed: FixedParameters,
    grid: SimulationGrid,
    config: &McmcConfig,
) -> Result<PosteriorEnsemble> {
    let problem = CalibrationProblem::two_step(observations, prior, spec, fixed, grid)?;
    run_mcmc(&problem, config)
}
