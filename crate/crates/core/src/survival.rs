//! Kaplan-Meier curves, bootstrap variance bands and the logrank test.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, TwinError};
use crate::risk::{superquantile, QoiSamples};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEntry {
    pub patient_id: String,
    pub ttp: f64,
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalInput {
    pub entries: Vec<SurvivalEntry>,
}

impl SurvivalInput {
    /// Entries at or beyond `max_ttp` are right-censored there.
    pub fn from_ttps<S: AsRef<str>>(ids: &[S], ttps: &[f64], max_ttp: f64) -> Result<Self> {
        if ids.len() != ttps.len() {
            return Err(TwinError::InvalidConfig(format!(
                "{} ids for {} times",
                ids.len(),
                ttps.len()
            )));
        }
        let entries = ids
            .iter()
            .zip(ttps)
            .map(|(id, &t)| SurvivalEntry {
                patient_id: id.as_ref().to_string(),
                ttp: t.min(max_ttp),
                censored: t >= max_ttp - 1e-9,
            })
            .collect();
        let input = Self { entries };
        input.validate(max_ttp)?;
        Ok(input)
    }

    fn anonymous(ttps: &[f64], max_ttp: f64) -> Self {
        Self {
            entries: ttps
                .iter()
                .map(|&t| SurvivalEntry {
                    patient_id: String::new(),
                    ttp: t.min(max_ttp),
                    censored: t >= max_ttp - 1e-9,
                })
                .collect(),
        }
    }

    pub fn validate(&self, max_ttp: f64) -> Result<()> {
        for e in &self.entries {
            if !(e.ttp > 0.0 && e.ttp <= max_ttp) {
                return Err(TwinError::OutOfRange(format!(
                    "{}: TTP {} outside (0, {max_ttp}]",
                    e.patient_id, e.ttp
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn at_risk(&self, t: f64) -> usize {
        self.entries.iter().filter(|e| e.ttp >= t).count()
    }

    fn events_at(&self, t: f64) -> usize {
        self.entries.iter().filter(|e| !e.censored && e.ttp == t).count()
    }

    fn event_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.entries.iter().filter(|e| !e.censored).map(|e| e.ttp).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}

/// One step of the product-limit estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStep {
    pub t: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Right-continuous step function starting at `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub steps: Vec<CurveStep>,
}

impl SurvivalCurve {
    pub fn at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.t <= t)
            .last()
            .map_or(1.0, |s| s.survival)
    }

    pub fn final_survival(&self) -> f64 {
        self.steps.last().map_or(1.0, |s| s.survival)
    }
}

pub fn kaplan_meier(input: &SurvivalInput) -> Result<SurvivalCurve> {
    if input.is_empty() {
        return Err(TwinError::Empty("survival input"));
    }
    let mut steps = vec![CurveStep {
        t: 0.0,
        survival: 1.0,
        at_risk: input.len(),
        events: 0,
    }];
    let mut s = 1.0;
    for t in input.event_times() {
        let m = input.at_risk(t);
        let d = input.events_at(t);
        s *= 1.0 - d as f64 / m as f64;
        steps.push(CurveStep {
            t,
            survival: s,
            at_risk: m,
            events: d,
        });
    }
    Ok(SurvivalCurve { steps })
}

/// Pointwise spread of bootstrapped curves on a fixed time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBand {
    pub times: Vec<f64>,
    pub std_dev: Vec<f64>,
}

impl VarianceBand {
    /// `0, step, 2 step, ..., max_ttp`.
    pub fn grid(max_ttp: f64, step: f64) -> Vec<f64> {
        let n = (max_ttp / step).round() as usize;
        (0..=n).map(|i| i as f64 * step).collect()
    }
}

/// Bootstrap band: each replicate resamples every patient's TTP draws with
/// replacement, takes the TTP superquantile per patient and rebuilds the
/// curve. The band is the population standard deviation across replicates.
pub fn survival_variance_band(
    per_patient: &[QoiSamples],
    alpha: f64,
    n_boot: usize,
    seed: u64,
    max_ttp: f64,
    times: &[f64],
) -> Result<VarianceBand> {
    if per_patient.is_empty() {
        return Err(TwinError::Empty("per-patient samples"));
    }
    if n_boot == 0 {
        return Err(TwinError::InvalidConfig("n_boot must be positive".into()));
    }
    if let Some(p) = per_patient.iter().position(|s| s.values.is_empty()) {
        return Err(TwinError::OutOfRange(format!("patient {p} has no TTP samples")));
    }
    let curves = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let ttps = per_patient
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = seed::stream(seed, &[seed::BOOTSTRAP, b as u64, i as u64]);
                    let n = s.values.len();
                    let resampled: Vec<f64> = (0..n).map(|_| s.values[rng.random_range(0..n)]).collect();
                    superquantile(&resampled, alpha).map(|m| -m)
                })
                .collect::<Result<Vec<_>>>()?;
            let curve = kaplan_meier(&SurvivalInput::anonymous(&ttps, max_ttp))?;
            Ok(times.iter().map(|&t| curve.at(t)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let nb = n_boot as f64;
    let std_dev = (0..times.len())
        .map(|j| {
            let shift = curves[0][j];
            let mean = curves.iter().map(|c| c[j] - shift).sum::<f64>() / nb;
            (curves.iter().map(|c| (c[j] - shift - mean).powi(2)).sum::<f64>() / nb).sqrt()
        })
        .collect();
    Ok(VarianceBand {
        times: times.to_vec(),
        std_dev,
    })
}

/// Columns: t_days, survival_prob, band_lo, band_hi (one standard deviation,
/// clipped to [0, 1]).
pub fn write_curve_csv<W: Write>(curve: &SurvivalCurve, band: &VarianceBand, mut w: W) -> std::io::Result<()> {
    writeln!(w, "t_days,survival_prob,band_lo,band_hi")?;
    for (&t, &sd) in band.times.iter().zip(&band.std_dev) {
        let s = curve.at(t);
        writeln!(w, "{t},{s},{},{}", (s - sd).max(0.0), (s + sd).min(1.0))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogrankResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// Observed minus expected events in group a.
    pub o_minus_e: f64,
    pub variance: f64,
}

impl LogrankResult {
    /// Copy with the p-value rounded to 4 significant figures.
    pub fn rounded(&self) -> Self {
        Self {
            p_value: round_significant(self.p_value, 4),
            ..*self
        }
    }
}

pub fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Two-group logrank test without continuity correction.
pub fn logrank(a: &SurvivalInput, b: &SurvivalInput) -> Result<LogrankResult> {
    if a.is_empty() || b.is_empty() {
        return Err(TwinError::Empty("logrank group"));
    }
    let mut times = a.event_times();
    times.extend(b.event_times());
    times.sort_by(f64::total_cmp);
    times.dedup();

    let (mut o_minus_e, mut variance) = (0.0, 0.0);
    for t in times {
        let na = a.at_risk(t) as f64;
        let nb = b.at_risk(t) as f64;
        let n = na + nb;
        let d = (a.events_at(t) + b.events_at(t)) as f64;
        o_minus_e += a.events_at(t) as f64 - d * na / n;
        if n > 1.0 {
            variance += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    let statistic = if variance > 0.0 { o_minus_e * o_minus_e / variance } else { 0.0 };
    Ok(LogrankResult {
        statistic,
        p_value: chi2_1_sf(statistic),
        n_a: a.len(),
        n_b: b.len(),
        o_minus_e,
        variance,
    })
}
