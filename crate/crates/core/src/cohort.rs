//! Virtual patients: ground-truth parameters drawn from the population
//! prior and noisy tumor-burden observations generated from them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TwinError};
use crate::model::{CompiledRegimen, FixedParameters, PatientParameters, SimulationGrid, TreatmentRegimen};
use crate::risk::TtpConfig;
use crate::seed;
use crate::truncnorm::TruncatedNormal;

/// Independent truncated-normal priors over the four uncertain parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub rho: TruncatedNormal,
    #[serde(rename = "K")]
    pub k: TruncatedNormal,
    #[serde(rename = "N_initial")]
    pub n_initial: TruncatedNormal,
    #[serde(rename = "alpha_RT")]
    pub alpha_rt: TruncatedNormal,
}

impl Default for PriorSpec {
    /// Population-level priors for high-grade glioma.
    fn default() -> Self {
        Self {
            rho: TruncatedNormal { mu: 0.09, sigma: 0.15, lower: 0.007, upper: 0.25 },
            k: TruncatedNormal { mu: 1e11, sigma: 2e10, lower: 9e10, upper: 1.8e11 },
            n_initial: TruncatedNormal { mu: 1.9e10, sigma: 1.2e10, lower: 4.7e9, upper: 4.7e10 },
            alpha_rt: TruncatedNormal { mu: 0.05, sigma: 0.025, lower: 0.001, upper: 0.1 },
        }
    }
}

impl PriorSpec {
    pub fn marginals(&self) -> [&TruncatedNormal; 4] {
        [&self.rho, &self.k, &self.n_initial, &self.alpha_rt]
    }

    pub fn validate(&self) -> Result<()> {
        self.marginals().iter().try_for_each(|m| m.validate())
    }

    pub fn contains(&self, theta: &PatientParameters) -> bool {
        self.marginals()
            .iter()
            .zip(theta.to_array())
            .all(|(m, x)| m.contains(x))
    }

    pub fn ln_density(&self, theta: &PatientParameters) -> f64 {
        self.marginals()
            .iter()
            .zip(theta.to_array())
            .map(|(m, x)| m.ln_pdf(x))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PatientParameters {
        PatientParameters {
            rho: self.rho.sample(rng),
            k: self.k.sample(rng),
            n_initial: self.n_initial.sample(rng),
            alpha_rt: self.alpha_rt.sample(rng),
        }
    }
}

/// Additive truncated-normal measurement noise at fixed imaging days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    /// Noise scale, cells.
    pub sigma: f64,
    /// Imaging days.
    pub schedule: Vec<u32>,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self {
            sigma: 2e9,
            schedule: vec![0, 20, 27],
        }
    }
}

impl ObservationModel {
    pub fn validate(&self, grid: &SimulationGrid) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TwinError::InvalidConfig(format!(
                "observation noise must be positive, got {}",
                self.sigma
            )));
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TwinError::InvalidConfig("imaging days must be strictly increasing".into()));
        }
        if let Some(&last) = self.schedule.last() {
            if last as f64 > grid.t_end {
                return Err(TwinError::InvalidConfig(format!(
                    "imaging day {last} is past the horizon {}",
                    grid.t_end
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Day.
    pub t: f64,
    /// Observed cell count.
    pub o: f64,
}

/// Time-ordered tumor burden measurements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationSet {
    pub entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(entries: Vec<Observation>) -> Result<Self> {
        let set = Self { entries };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(TwinError::InvalidObservations("times must be strictly increasing".into()));
        }
        if let Some(bad) = self.entries.iter().find(|e| !(e.o >= 0.0 && e.o.is_finite())) {
            return Err(TwinError::InvalidObservations(format!(
                "observation at day {} is negative or non-finite: {}",
                bad.t, bad.o
            )));
        }
        Ok(())
    }

    pub fn at(&self, day: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.t == day).map(|e| e.o)
    }

    /// Entries taken on the given days, in time order.
    pub fn subset(&self, days: &[f64]) -> ObservationSet {
        ObservationSet {
            entries: self
                .entries
                .iter()
                .filter(|e| days.contains(&e.t))
                .copied()
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ground truth kept apart from everything the twin is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub theta_true: PatientParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub id: String,
    pub observations: ObservationSet,
    /// Scoring only. Calibration and optimization take observations, never this.
    pub oracle: Oracle,
}

/// A generated cohort and the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<VirtualPatient>,
    pub prior: PriorSpec,
    pub observation_model: ObservationModel,
    pub seed: u64,
}

impl Cohort {
    pub fn patient(&self, id: &str) -> Option<&VirtualPatient> {
        self.patients.iter().find(|p| p.id == id)
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{:03}", index + 1)
}

/// `n_patients` independent prior draws. Patient `i` draws from its own
/// stream `(seed, COHORT_THETA, i)`.
pub fn sample_cohort(prior: &PriorSpec, n_patients: usize, seed: u64) -> Result<Vec<PatientParameters>> {
    prior.validate()?;
    if n_patients == 0 {
        return Err(TwinError::InvalidConfig("cohort needs at least one patient".into()));
    }
    Ok((0..n_patients)
        .into_par_iter()
        .map(|i| prior.sample(&mut seed::stream(seed, &[seed::COHORT_THETA, i as u64])))
        .collect())
}

/// Noisy observations `o_t = N(t) + eps`, `eps ~ TN(0, sigma^2, -N(t), inf)`,
/// on the model's imaging days. `N(t)` is the count at the start of day `t`.
pub fn observe(
    theta_true: &PatientParameters,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    model: &ObservationModel,
    grid: &SimulationGrid,
    seed: u64,
) -> Result<ObservationSet> {
    model.validate(grid)?;
    theta_true.validate(crate::model::ParameterCheck::Strict)?;
    let compiled = CompiledRegimen::new(regimen, grid)?;
    let mut rng = seed::stream(seed, &[seed::COHORT_OBSERVATIONS]);
    let spd = compiled.steps_per_day();
    let mut entries = Vec::with_capacity(model.schedule.len());
    for &day in &model.schedule {
        let n = compiled.value_at(theta_true, fixed, day as usize * spd);
        let noise = TruncatedNormal::new(0.0, model.sigma, -n, f64::INFINITY)?;
        let o = (n + noise.sample(&mut rng)).max(0.0);
        entries.push(Observation { t: day as f64, o });
    }
    ObservationSet::new(entries)
}

/// Generate a cohort: truth from the prior, observations under the
/// standard-of-care first week.
pub fn generate_cohort(
    prior: &PriorSpec,
    model: &ObservationModel,
    fixed: &FixedParameters,
    grid: &SimulationGrid,
    n_patients: usize,
    seed: u64,
) -> Result<Cohort> {
    let thetas = sample_cohort(prior, n_patients, seed)?;
    let soc = TreatmentRegimen::standard_of_care();
    let patients = thetas
        .into_par_iter()
        .enumerate()
        .map(|(i, theta_true)| {
            let obs_seed = seed::derive(seed, &[seed::COHORT_OBSERVATIONS, i as u64]);
            Ok(VirtualPatient {
                id: patient_id(i),
                observations: observe(&theta_true, fixed, &soc, model, grid, obs_seed)?,
                oracle: Oracle { theta_true },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        patients,
        prior: *prior,
        observation_model: model.clone(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProgressorGroup {
    Early,
    Intermediate,
    Late,
}

impl ProgressorGroup {
    pub const ALL: [ProgressorGroup; 3] = [Self::Early, Self::Intermediate, Self::Late];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Early => "early",
            Self::Intermediate => "intermediate",
            Self::Late => "late",
        }
    }
}

/// Days in a month for progressor grouping.
pub const DAYS_PER_MONTH: f64 = 30.0;

/// Group a patient by the delay between the end of radiotherapy and
/// progression under standard of care: early within one month, late at
/// three months or more. The input is the TTP superquantile measured from
/// the threshold day, as everywhere else.
pub fn classify_progressor(ttp_superquantile: f64, cfg: &TtpConfig) -> Result<ProgressorGroup> {
    if !(0.0..=cfg.max_ttp()).contains(&ttp_superquantile) {
        return Err(TwinError::OutOfRange(format!(
            "TTP superquantile {ttp_superquantile} outside [0, {}]",
            cfg.max_ttp()
        )));
    }
    let after_rt = ttp_superquantile - (cfg.post_rt_day - cfg.threshold_day) as f64;
    // Rounding guard for values that are sums of grid steps.
    let eps = 1e-9;
    Ok(if after_rt <= DAYS_PER_MONTH + eps {
        ProgressorGroup::Early
    } else if after_rt >= 3.0 * DAYS_PER_MONTH - eps {
        ProgressorGroup::Late
    } else {
        ProgressorGroup::Intermediate
    })
}
