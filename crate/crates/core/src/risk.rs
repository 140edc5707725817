//! Time to progression and its tail risk under posterior uncertainty.
//!
//! The quantity of interest is `M = -TTP`, so large values are bad and the
//! superquantile of `M` is the conservative-tail risk. Reported TTP
//! superquantiles are `-superquantile(M)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::calibration::PosteriorEnsemble;
use crate::error::{Result, TwinError};
use crate::model::{
    CompiledRegimen, FixedParameters, ParameterCheck, PatientParameters, SimulationGrid, TreatmentRegimen,
};
use crate::seed;

/// Calendar of the progression criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtpConfig {
    /// Day whose pre-treatment count is the progression threshold.
    pub threshold_day: u32,
    /// Last day of radiotherapy; progression is only sought after it.
    pub post_rt_day: u32,
    /// End of the forecast.
    pub horizon_day: u32,
}

impl Default for TtpConfig {
    fn default() -> Self {
        Self {
            threshold_day: 20,
            post_rt_day: 62,
            horizon_day: 152,
        }
    }
}

impl TtpConfig {
    /// TTP assigned when the threshold is never crossed.
    pub fn max_ttp(&self) -> f64 {
        (self.horizon_day - self.threshold_day) as f64
    }

    pub fn validate(&self, grid: &SimulationGrid) -> Result<()> {
        if !(self.threshold_day < self.post_rt_day && self.post_rt_day < self.horizon_day) {
            return Err(TwinError::InvalidConfig(format!(
                "need threshold_day < post_rt_day < horizon_day, got {} / {} / {}",
                self.threshold_day, self.post_rt_day, self.horizon_day
            )));
        }
        if self.horizon_day as f64 > grid.t_end {
            return Err(TwinError::InvalidConfig(format!(
                "TTP horizon {} exceeds simulation horizon {}",
                self.horizon_day, grid.t_end
            )));
        }
        Ok(())
    }
}

/// Risk level and Monte Carlo sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub alpha: f64,
    pub n_mc: usize,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            n_mc: 5000,
        }
    }
}

/// Fewest samples allowed in the tail beyond the quantile.
pub const MIN_TAIL_SAMPLES: f64 = 20.0;

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if (self.n_mc as f64) * (1.0 - self.alpha) < MIN_TAIL_SAMPLES - 1e-9 {
            return Err(TwinError::InvalidConfig(format!(
                "n_mc = {} leaves fewer than {MIN_TAIL_SAMPLES} samples in the {} tail",
                self.n_mc, self.alpha
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TwinError::InvalidConfig(format!("risk level must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Monte Carlo realizations of `M = -TTP`, in draw order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiSamples {
    pub values: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
}

impl QoiSamples {
    pub fn ttp_days(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|m| -m)
    }

    /// CSV with columns `sample_index,ttp_days`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample_index,ttp_days")?;
        for (i, m) in self.values.iter().enumerate() {
            writeln!(w, "{i},{}", -m)?;
        }
        Ok(())
    }
}

/// Grid indices of the progression criterion.
#[derive(Debug, Clone, Copy)]
struct TtpIndices {
    threshold: usize,
    post_rt: usize,
    horizon: usize,
    steps_per_day: usize,
}

impl TtpIndices {
    fn new(cfg: &TtpConfig, grid: &SimulationGrid) -> Result<Self> {
        cfg.validate(grid)?;
        let spd = grid.steps_per_day()?;
        Ok(Self {
            threshold: cfg.threshold_day as usize * spd,
            post_rt: cfg.post_rt_day as usize * spd,
            horizon: cfg.horizon_day as usize * spd,
            steps_per_day: spd,
        })
    }

    /// First grid time strictly after the end of radiotherapy with the count
    /// strictly above the threshold, measured from the threshold day.
    fn scan(
        &self,
        compiled: &CompiledRegimen,
        theta: &PatientParameters,
        fixed: &FixedParameters,
        start: (usize, f64),
        mut n_th: Option<f64>,
    ) -> f64 {
        let mut crossing = None;
        compiled.integrate(theta, fixed, start.0, start.1, |i, n| {
            if i == self.threshold && n_th.is_none() {
                n_th = Some(n);
            }
            if i > self.post_rt {
                let th = n_th.expect("threshold precedes the post-RT window");
                if n > th {
                    crossing = Some(i);
                    return false;
                }
            }
            i < self.horizon
        });
        let end = crossing.unwrap_or(self.horizon);
        (end - self.threshold) as f64 / self.steps_per_day as f64
    }
}

/// TTP in days for one parameter set; the horizon value when the threshold
/// is never exceeded.
pub fn time_to_progression(
    theta: &PatientParameters,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    cfg: &TtpConfig,
    grid: &SimulationGrid,
) -> Result<f64> {
    time_to_progression_checked(theta, fixed, regimen, cfg, grid, ParameterCheck::Strict)
}

pub fn time_to_progression_checked(
    theta: &PatientParameters,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    cfg: &TtpConfig,
    grid: &SimulationGrid,
    check: ParameterCheck,
) -> Result<f64> {
    theta.validate(check)?;
    fixed.validate()?;
    let idx = TtpIndices::new(cfg, grid)?;
    let compiled = CompiledRegimen::new(regimen, grid)?;
    Ok(idx.scan(&compiled, theta, fixed, (0, theta.n_initial), None))
}

fn check_samples(values: &[f64], alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    let required = (1.0 / (1.0 - alpha) - 1e-9).ceil() as usize;
    if values.len() < required.max(1) {
        return Err(TwinError::InsufficientSamples {
            required: required.max(1),
            actual: values.len(),
        });
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(TwinError::InvalidConfig("samples contain NaN".into()));
    }
    Ok(())
}

/// 1-based rank of the alpha-quantile order statistic, `ceil(alpha n)`,
/// with products that are integers up to rounding treated as integers.
fn quantile_rank(alpha: f64, n: usize) -> usize {
    let an = alpha * n as f64;
    let rounded = an.round();
    let rank = if (an - rounded).abs() <= 1e-9 * (n as f64).max(1.0) {
        rounded
    } else {
        an.ceil()
    };
    (rank as usize).clamp(1, n)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Empirical alpha-quantile: the `ceil(alpha n)`-th smallest sample.
pub fn quantile(values: &[f64], alpha: f64) -> Result<f64> {
    check_samples(values, alpha)?;
    let s = sorted(values);
    Ok(s[quantile_rank(alpha, s.len()) - 1])
}

/// Tail statistics of one sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub alpha: f64,
    pub quantile: f64,
    pub superquantile: f64,
    /// Monte Carlo standard error of the superquantile estimate.
    pub std_error: f64,
    pub mean: f64,
}

/// Quantile, superquantile and its standard error in one pass over the
/// sorted samples. The superquantile is `Q + E[(X - Q)^+] / (1 - alpha)`;
/// its standard error uses the sample variance of
/// `Q + (X - Q)^+ / (1 - alpha)`.
pub fn risk_summary(values: &[f64], alpha: f64) -> Result<RiskSummary> {
    check_samples(values, alpha)?;
    let s = sorted(values);
    let n = s.len() as f64;
    let q = s[quantile_rank(alpha, s.len()) - 1];
    let excess: f64 = s.iter().map(|&x| (x - q).max(0.0)).sum();
    let superquantile = q + excess / n / (1.0 - alpha);
    let var = if s.len() > 1 {
        s.iter()
            .map(|&x| {
                let phi = q + (x - q).max(0.0) / (1.0 - alpha);
                (phi - superquantile).powi(2)
            })
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    Ok(RiskSummary {
        alpha,
        quantile: q,
        superquantile,
        std_error: (var / n).sqrt(),
        mean: s.iter().sum::<f64>() / n,
    })
}

/// Alpha-superquantile (conditional value at risk) of the samples.
pub fn superquantile(values: &[f64], alpha: f64) -> Result<f64> {
    risk_summary(values, alpha).map(|r| r.superquantile)
}

/// A fixed, ordered set of parameter draws with regimen-independent
/// quantities cached: the progression threshold and the state at the start
/// of week two, which every clinical regimen reaches identically.
#[derive(Debug, Clone)]
pub struct ThetaSet {
    thetas: Vec<PatientParameters>,
    fixed: FixedParameters,
    grid: SimulationGrid,
    cfg: TtpConfig,
    idx: TtpIndices,
    thresholds: Vec<f64>,
    checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
struct Checkpoint {
    index: usize,
    values: Vec<f64>,
    reference: TreatmentRegimen,
}

impl ThetaSet {
    pub fn new(
        thetas: Vec<PatientParameters>,
        fixed: FixedParameters,
        grid: SimulationGrid,
        cfg: TtpConfig,
    ) -> Result<Self> {
        if thetas.is_empty() {
            return Err(TwinError::Empty("parameter set"));
        }
        fixed.validate()?;
        for t in &thetas {
            t.validate(ParameterCheck::Strict)?;
        }
        let idx = TtpIndices::new(&cfg, &grid)?;
        let reference = TreatmentRegimen::standard_of_care();
        let compiled = CompiledRegimen::new(&reference, &grid)?;
        let week_two = (reference.treatment_start_day + 7) as usize * idx.steps_per_day;
        let cache_index = (week_two > idx.threshold && week_two <= idx.post_rt).then_some(week_two);
        let (thresholds, cached): (Vec<f64>, Vec<f64>) = thetas
            .par_iter()
            .map(|theta| {
                let mut n_th = f64::NAN;
                let mut at_checkpoint = f64::NAN;
                let stop = cache_index.unwrap_or(idx.threshold);
                compiled.integrate(theta, &fixed, 0, theta.n_initial, |i, n| {
                    if i == idx.threshold {
                        n_th = n;
                    }
                    if Some(i) == cache_index {
                        at_checkpoint = n;
                    }
                    i < stop
                });
                (n_th, at_checkpoint)
            })
            .unzip();
        let checkpoint = cache_index.map(|index| Checkpoint {
            index,
            values: cached,
            reference,
        });
        Ok(Self {
            thetas,
            fixed,
            grid,
            cfg,
            idx,
            thresholds,
            checkpoint,
        })
    }

    /// `n` draws with replacement from the ensemble.
    pub fn draw(
        ensemble: &PosteriorEnsemble,
        n: usize,
        seed: u64,
        fixed: FixedParameters,
        grid: SimulationGrid,
        cfg: TtpConfig,
    ) -> Result<Self> {
        if ensemble.samples.is_empty() {
            return Err(TwinError::Empty("posterior ensemble"));
        }
        let mut rng = seed::stream(seed, &[seed::MONTE_CARLO]);
        let thetas = (0..n)
            .map(|_| ensemble.samples[rng.random_range(0..ensemble.samples.len())])
            .collect();
        Self::new(thetas, fixed, grid, cfg)
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[PatientParameters] {
        &self.thetas
    }

    pub fn ttp_config(&self) -> &TtpConfig {
        &self.cfg
    }

    fn shares_prefix(&self, cp: &Checkpoint, regimen: &TreatmentRegimen) -> bool {
        regimen.treatment_start_day == cp.reference.treatment_start_day
            && regimen.treatment_days_per_week == cp.reference.treatment_days_per_week
            && regimen.chemo == cp.reference.chemo
            && regimen.weekly_doses[0] == cp.reference.weekly_doses[0]
    }

    /// TTP in days for every draw, in order.
    pub fn ttp(&self, regimen: &TreatmentRegimen) -> Result<Vec<f64>> {
        let compiled = CompiledRegimen::new(regimen, &self.grid)?;
        let checkpoint = self.checkpoint.as_ref().filter(|cp| self.shares_prefix(cp, regimen));
        Ok(self
            .thetas
            .par_iter()
            .enumerate()
            .map(|(j, theta)| {
                let (start, n_th) = match checkpoint {
                    Some(cp) => ((cp.index, cp.values[j]), Some(self.thresholds[j])),
                    None if self.idx.threshold <= regimen.treatment_start_day as usize * self.idx.steps_per_day => {
                        ((0, theta.n_initial), Some(self.thresholds[j]))
                    }
                    None => ((0, theta.n_initial), None),
                };
                self.idx.scan(&compiled, theta, &self.fixed, start, n_th)
            })
            .collect())
    }

    /// `M = -TTP` for every draw.
    pub fn qoi(&self, regimen: &TreatmentRegimen, seed: u64) -> Result<QoiSamples> {
        let values: Vec<f64> = self.ttp(regimen)?.into_iter().map(|t| -t).collect();
        Ok(QoiSamples {
            n_mc: values.len(),
            values,
            seed,
        })
    }
}

/// Monte Carlo propagation: `risk.n_mc` draws from the ensemble, one TTP each.
pub fn propagate(
    ensemble: &PosteriorEnsemble,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    cfg: &TtpConfig,
    risk: &RiskConfig,
    grid: &SimulationGrid,
    seed: u64,
) -> Result<QoiSamples> {
    let set = ThetaSet::draw(ensemble, risk.n_mc, seed, *fixed, *grid, *cfg)?;
    set.qoi(regimen, seed)
}

/// The conservative-tail TTP: `-superquantile(M)`.
pub fn ttp_superquantile(
    ensemble: &PosteriorEnsemble,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    cfg: &TtpConfig,
    risk: &RiskConfig,
    grid: &SimulationGrid,
    seed: u64,
) -> Result<f64> {
    let samples = propagate(ensemble, fixed, regimen, cfg, risk, grid, seed)?;
    Ok(-superquantile(&samples.values, risk.alpha)?)
}
