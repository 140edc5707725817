//! Pipeline stages: cohort, calibration, optimization, survival and the
//! cohort summary.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use oncotwin_core::calibration::{calibrate, McmcConfig, PosteriorEnsemble};
use oncotwin_core::cohort::{classify_progressor, generate_cohort, Cohort, ObservationSet, ProgressorGroup};
use oncotwin_core::model::{TreatmentRegimen, MAX_WEEKLY_DOSE, N_WEEKS};
use oncotwin_core::optimizer::{
    matched_control_dose_reduction, pareto_sweep, report_set, MatchedControl, OptimizationConfig, ParetoFront,
};
use oncotwin_core::risk::{risk_summary, QoiSamples, RiskConfig, ThetaSet};
use oncotwin_core::seed;
use oncotwin_core::survival::{
    kaplan_meier, logrank, survival_variance_band, write_curve_csv, LogrankResult, SurvivalCurve, SurvivalInput,
    VarianceBand,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_bytes, RunDir};
use crate::config::{RunConfig, Scale};
use crate::error::{AppError, AppResult};

pub const SOC_ARM: &str = "SOC";

/// Largest Monte Carlo sample count served by one what-if evaluation.
pub const MAX_EVAL_SAMPLES: usize = 20_000;

pub fn arm_label(d_max: f64) -> String {
    format!("OUU:{d_max}")
}

/// Arm labels in reporting order: every dose cap, then SOC.
pub fn arms(cfg: &RunConfig) -> Vec<String> {
    let mut caps = cfg.optimization.d_max_grid.clone();
    caps.sort_by(f64::total_cmp);
    caps.dedup();
    caps.into_iter().map(arm_label).chain([SOC_ARM.to_string()]).collect()
}

/// Position of a `pNNN` id in the cohort.
pub fn patient_index(cohort: &Cohort, id: &str) -> AppResult<usize> {
    cohort
        .patients
        .iter()
        .position(|p| p.id == id)
        .ok_or_else(|| AppError::UnknownPatient(id.to_string()))
}

pub fn mcmc_config(cfg: &RunConfig, index: usize) -> McmcConfig {
    McmcConfig {
        seed: seed::derive(cfg.mcmc.seed, &[seed::MCMC_CHAIN, index as u64]),
        ..cfg.mcmc.clone()
    }
}

pub fn optimization_config(cfg: &RunConfig, index: usize) -> OptimizationConfig {
    OptimizationConfig {
        seed: seed::derive(cfg.optimization.seed, &[seed::OPTIMIZER_FROZEN, index as u64]),
        ..cfg.optimization.clone()
    }
}

pub fn build_cohort(run: &RunDir) -> AppResult<Cohort> {
    let c = run.config();
    let cohort = generate_cohort(&c.prior, &c.observation, &c.fixed, &c.grid, c.n_patients, c.seed)?;
    run.store(&run.cohort_path(), &cohort)?;
    Ok(cohort)
}

pub fn load_cohort(run: &RunDir) -> AppResult<Cohort> {
    run.load(&run.cohort_path(), "cohort")
}

/// Calibrate one patient from its observations alone.
pub fn calibrate_patient(cfg: &RunConfig, observations: &ObservationSet, index: usize) -> AppResult<PosteriorEnsemble> {
    Ok(calibrate(
        observations,
        &cfg.prior,
        &cfg.likelihood,
        cfg.fixed,
        cfg.grid,
        &mcmc_config(cfg, index),
    )?)
}

/// Calibrate `ids` (all patients when empty) and store the ensembles.
pub fn run_calibration(run: &RunDir, cohort: &Cohort, ids: &[String]) -> AppResult<Vec<(String, PosteriorEnsemble)>> {
    let targets = select(cohort, ids)?;
    let out = targets
        .par_iter()
        .map(|&i| {
            let p = &cohort.patients[i];
            calibrate_patient(run.config(), &p.observations, i).map(|e| (p.id.clone(), e))
        })
        .collect::<AppResult<Vec<_>>>()?;
    for (id, ens) in &out {
        run.store(&run.ensemble_path(id), ens)?;
    }
    Ok(out)
}

pub fn load_ensemble(run: &RunDir, id: &str) -> AppResult<PosteriorEnsemble> {
    run.load(&run.ensemble_path(id), "calibrate")
}

fn select(cohort: &Cohort, ids: &[String]) -> AppResult<Vec<usize>> {
    if ids.is_empty() {
        Ok((0..cohort.patients.len()).collect())
    } else {
        ids.iter().map(|id| patient_index(cohort, id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFront {
    pub patient_id: String,
    pub front: ParetoFront,
    pub matched_control: MatchedControl,
}

pub fn optimize_patient(cfg: &RunConfig, id: &str, index: usize, ensemble: &PosteriorEnsemble) -> AppResult<PatientFront> {
    let front = pareto_sweep(ensemble, &optimization_config(cfg, index), cfg.fixed, cfg.grid, cfg.ttp)?;
    let matched_control = matched_control_dose_reduction(&front, cfg.survival.tolerance_days)?;
    Ok(PatientFront {
        patient_id: id.to_string(),
        front,
        matched_control,
    })
}

pub fn store_front(run: &RunDir, pf: &PatientFront) -> AppResult<()> {
    run.store(&run.front_path(&pf.patient_id), pf)?;
    let mut csv = Vec::new();
    pf.front
        .write_csv(&pf.patient_id, &mut csv)
        .expect("writing to memory");
    write_bytes(&run.front_csv_path(&pf.patient_id), &csv)
}

pub fn load_front(run: &RunDir, id: &str) -> AppResult<PatientFront> {
    run.load(&run.front_path(id), "optimize")
}

/// Optimize `ids` (all when empty) from their stored ensembles.
pub fn run_optimization(
    run: &RunDir,
    cohort: &Cohort,
    ensembles: &[(String, PosteriorEnsemble)],
) -> AppResult<Vec<PatientFront>> {
    let fronts = ensembles
        .par_iter()
        .map(|(id, ens)| optimize_patient(run.config(), id, patient_index(cohort, id)?, ens))
        .collect::<AppResult<Vec<_>>>()?;
    for pf in &fronts {
        store_front(run, pf)?;
    }
    Ok(fronts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    pub patient_id: String,
    pub observations: ObservationSet,
    pub ensemble: String,
    pub front: Option<String>,
    pub converged: bool,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

pub fn store_record(run: &RunDir, id: &str, observations: &ObservationSet, ensemble: &PosteriorEnsemble) -> AppResult<()> {
    let rel = |p: std::path::PathBuf| {
        p.strip_prefix(run.root())
            .map(|r| r.display().to_string())
            .unwrap_or_else(|_| p.display().to_string())
    };
    let front = run.front_path(id);
    let record = TwinRecord {
        patient_id: id.to_string(),
        observations: observations.clone(),
        ensemble: rel(run.ensemble_path(id)),
        front: front.exists().then(|| rel(front)),
        converged: ensemble.is_converged(),
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    run.store(&run.record_path(id), &record)
}

/// One arm of the cohort survival comparison.
#[derive(Debug, Clone)]
pub struct ArmSurvival {
    pub arm: String,
    pub input: SurvivalInput,
    pub curve: SurvivalCurve,
    pub band: VarianceBand,
    pub logrank: Option<LogrankResult>,
}

fn arm_regimen(front: &ParetoFront, arm: &str) -> Option<TreatmentRegimen> {
    if arm == SOC_ARM {
        return Some(front.soc_reference.regimen.clone());
    }
    let d: f64 = arm.strip_prefix("OUU:")?.parse().ok()?;
    front.point(d).map(|p| p.regimen.clone())
}

fn arm_ttp(front: &ParetoFront, arm: &str) -> Option<f64> {
    if arm == SOC_ARM {
        return Some(front.soc_reference.ttp_superquantile);
    }
    let d: f64 = arm.strip_prefix("OUU:")?.parse().ok()?;
    front.point(d).map(|p| p.ttp_superquantile)
}

/// KM curves, bootstrap bands and logrank tests against SOC for every arm.
/// Patients missing an arm's front point are left out of that arm.
pub fn survival_analysis(
    cfg: &RunConfig,
    fronts: &[PatientFront],
    ensembles: &[(String, PosteriorEnsemble)],
    indices: &[usize],
) -> AppResult<Vec<ArmSurvival>> {
    let max_ttp = cfg.ttp.max_ttp();
    let times = VarianceBand::grid(max_ttp, cfg.survival.band_step);
    let report_sets = ensembles
        .par_iter()
        .zip(indices.par_iter())
        .map(|((_, ens), &i)| Ok(report_set(ens, &optimization_config(cfg, i), cfg.fixed, cfg.grid, cfg.ttp)?))
        .collect::<AppResult<Vec<ThetaSet>>>()?;

    let mut out: Vec<ArmSurvival> = Vec::new();
    for arm in arms(cfg) {
        let mut ids = Vec::new();
        let mut ttps = Vec::new();
        let mut samples = Vec::new();
        for (pf, set) in fronts.iter().zip(&report_sets) {
            let (Some(regimen), Some(t)) = (arm_regimen(&pf.front, &arm), arm_ttp(&pf.front, &arm)) else {
                continue;
            };
            let values: Vec<f64> = set.ttp(&regimen)?.into_iter().map(|t| -t).collect();
            ids.push(pf.patient_id.clone());
            ttps.push(t);
            samples.push(QoiSamples {
                n_mc: values.len(),
                values,
                seed: 0,
            });
        }
        if ids.is_empty() {
            continue;
        }
        let input = SurvivalInput::from_ttps(&ids, &ttps, max_ttp)?;
        let curve = kaplan_meier(&input)?;
        let boot_seed = seed::derive(cfg.seed, &[seed::BOOTSTRAP, out.len() as u64]);
        let band = survival_variance_band(&samples, cfg.risk.alpha, cfg.survival.n_boot, boot_seed, max_ttp, &times)?;
        out.push(ArmSurvival {
            arm,
            input,
            curve,
            band,
            logrank: None,
        });
    }
    let soc_input = out.iter().find(|a| a.arm == SOC_ARM).map(|a| a.input.clone());
    if let Some(soc) = soc_input {
        for a in out.iter_mut().filter(|a| a.arm != SOC_ARM) {
            a.logrank = Some(logrank(&a.input, &soc)?);
        }
    }
    Ok(out)
}

pub fn store_survival(run: &RunDir, arms: &[ArmSurvival]) -> AppResult<()> {
    for a in arms {
        let mut csv = Vec::new();
        write_curve_csv(&a.curve, &a.band, &mut csv).expect("writing to memory");
        write_bytes(&run.curve_path(&a.arm), &csv)?;
        if let Some(lr) = &a.logrank {
            run.store(&run.logrank_path(&a.arm), &LogrankReport::from(lr))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogrankReport {
    pub statistic: f64,
    /// Four significant figures.
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

impl From<&LogrankResult> for LogrankReport {
    fn from(r: &LogrankResult) -> Self {
        let r = r.rounded();
        Self {
            statistic: r.statistic,
            p_value: r.p_value,
            n_a: r.n_a,
            n_b: r.n_b,
        }
    }
}

/// Medians keyed by `overall`, `early`, `intermediate`, `late`; `null` for an
/// empty group.
pub type GroupMedians = BTreeMap<String, Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scale: Scale,
    pub seed: u64,
    pub n_patients: usize,
    pub alpha: f64,
    pub arms: Vec<String>,
    pub group_sizes: BTreeMap<String, usize>,
    pub not_converged: Vec<String>,
    /// Median TTP superquantile per arm, days.
    pub median_ttp_superquantile: BTreeMap<String, Option<f64>>,
    /// Median of `arm - SOC` TTP superquantile per arm and progressor group.
    pub median_delta_ttp: BTreeMap<String, GroupMedians>,
    /// Median matched-control dose reduction, Gy.
    pub median_dose_reduction: GroupMedians,
    pub dose_reduction_flagged: usize,
    pub logrank: BTreeMap<String, LogrankReport>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn group_medians(groups: &[ProgressorGroup], values: &[Option<f64>]) -> GroupMedians {
    let pick = |g: Option<ProgressorGroup>| -> Vec<f64> {
        groups
            .iter()
            .zip(values)
            .filter(|(pg, _)| g.is_none_or(|g| **pg == g))
            .filter_map(|(_, v)| *v)
            .collect()
    };
    let mut m = BTreeMap::new();
    m.insert("overall".to_string(), median(&pick(None)));
    for g in ProgressorGroup::ALL {
        m.insert(g.as_str().to_string(), median(&pick(Some(g))));
    }
    m
}

pub fn summarize(
    run: &RunDir,
    ensembles: &[(String, PosteriorEnsemble)],
    fronts: &[PatientFront],
    survival: &[ArmSurvival],
) -> AppResult<Summary> {
    let cfg = run.config();
    let groups = fronts
        .iter()
        .map(|pf| classify_progressor(pf.front.soc_reference.ttp_superquantile, &cfg.ttp))
        .collect::<oncotwin_core::Result<Vec<_>>>()?;
    let mut group_sizes = BTreeMap::new();
    for g in ProgressorGroup::ALL {
        group_sizes.insert(g.as_str().to_string(), groups.iter().filter(|x| **x == g).count());
    }
    let arm_list = arms(cfg);
    let mut median_ttp = BTreeMap::new();
    let mut median_delta = BTreeMap::new();
    for arm in &arm_list {
        let ttps: Vec<Option<f64>> = fronts.iter().map(|pf| arm_ttp(&pf.front, arm)).collect();
        median_ttp.insert(arm.clone(), median(&ttps.iter().flatten().copied().collect::<Vec<_>>()));
        if arm != SOC_ARM {
            let deltas: Vec<Option<f64>> = fronts
                .iter()
                .zip(&ttps)
                .map(|(pf, t)| t.map(|t| t - pf.front.soc_reference.ttp_superquantile))
                .collect();
            median_delta.insert(arm.clone(), group_medians(&groups, &deltas));
        }
    }
    let reductions: Vec<Option<f64>> = fronts.iter().map(|pf| Some(pf.matched_control.reduction)).collect();
    let logrank = survival
        .iter()
        .filter_map(|a| a.logrank.as_ref().map(|l| (a.arm.clone(), LogrankReport::from(l))))
        .collect();
    Ok(Summary {
        scale: cfg.scale,
        seed: cfg.seed,
        n_patients: fronts.len(),
        alpha: cfg.risk.alpha,
        arms: arm_list,
        group_sizes,
        not_converged: ensembles
            .iter()
            .filter(|(_, e)| !e.is_converged())
            .map(|(id, _)| id.clone())
            .collect(),
        median_ttp_superquantile: median_ttp,
        median_delta_ttp: median_delta,
        median_dose_reduction: group_medians(&groups, &reductions),
        dose_reduction_flagged: fronts.iter().filter(|pf| pf.matched_control.flagged).count(),
        logrank,
    })
}

/// Everything a full run produces, kept in memory for callers that score it.
pub struct Reproduction {
    pub cohort: Cohort,
    pub ensembles: Vec<(String, PosteriorEnsemble)>,
    pub fronts: Vec<PatientFront>,
    pub survival: Vec<ArmSurvival>,
    pub summary: Summary,
}

/// The full cohort study: every stage, every artifact, then the summary.
pub fn reproduce(run: &RunDir) -> AppResult<Reproduction> {
    let cohort = build_cohort(run)?;
    let ensembles = run_calibration(run, &cohort, &[])?;
    let fronts = run_optimization(run, &cohort, &ensembles)?;
    for (p, (id, ens)) in cohort.patients.iter().zip(&ensembles) {
        store_record(run, id, &p.observations, ens)?;
    }
    let indices: Vec<usize> = (0..ensembles.len()).collect();
    let survival = survival_analysis(run.config(), &fronts, &ensembles, &indices)?;
    store_survival(run, &survival)?;
    let summary = summarize(run, &ensembles, &fronts, &survival)?;
    run.store(&run.summary_path(), &summary)?;
    Ok(Reproduction {
        cohort,
        ensembles,
        fronts,
        survival,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    /// Weekly doses `u_2..u_6`, Gy/day.
    pub u: Vec<f64>,
    pub alpha: Option<f64>,
    pub n_mc: Option<usize>,
    pub seed: Option<u64>,
}

/// TTP counts in 1-day bins `[k, k + 1)` plus a terminal bin for draws
/// that never progress within the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtpHistogram {
    pub bin_width_days: f64,
    pub counts: Vec<usize>,
    pub end_of_simulation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub regimen: [f64; N_WEEKS],
    pub alpha: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub ttp_samples_histogram: TtpHistogram,
    pub ttp_superquantile: f64,
    pub ttp_quantile: f64,
    pub std_error: f64,
    pub total_dose: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] oncotwin_core::TwinError),
}

/// What-if evaluation of `u_2..u_6` on `n_mc` fresh draws from the ensemble.
pub fn evaluate(cfg: &RunConfig, ensemble: &PosteriorEnsemble, req: &EvaluateRequest) -> Result<Evaluation, EvaluateError> {
    let tail: [f64; N_WEEKS - 1] = req
        .u
        .as_slice()
        .try_into()
        .map_err(|_| EvaluateError::Invalid(format!("expected {} weekly doses u2..u6, got {}", N_WEEKS - 1, req.u.len())))?;
    if let Some((i, u)) = tail.iter().enumerate().find(|(_, u)| !(**u >= 0.0 && **u <= MAX_WEEKLY_DOSE)) {
        return Err(EvaluateError::Invalid(format!("u{} = {u} outside [0, {MAX_WEEKLY_DOSE}]", i + 2)));
    }
    let regimen = TreatmentRegimen::from_tail(tail).map_err(|e| EvaluateError::Invalid(e.to_string()))?;
    let risk = RiskConfig {
        alpha: req.alpha.unwrap_or(cfg.risk.alpha),
        n_mc: req.n_mc.unwrap_or(cfg.risk.n_mc).min(MAX_EVAL_SAMPLES),
    };
    risk.validate().map_err(|e| EvaluateError::Invalid(e.to_string()))?;
    let seed = req.seed.unwrap_or(cfg.seed);
    let set = ThetaSet::draw(ensemble, risk.n_mc, seed, cfg.fixed, cfg.grid, cfg.ttp)?;
    let ttp = set.ttp(&regimen)?;
    let m: Vec<f64> = ttp.iter().map(|t| -t).collect();
    let r = risk_summary(&m, risk.alpha)?;

    let max_ttp = cfg.ttp.max_ttp();
    let n_bins = max_ttp.ceil() as usize;
    let mut counts = vec![0; n_bins];
    let mut end_of_simulation = 0;
    for t in &ttp {
        if *t >= max_ttp {
            end_of_simulation += 1;
        } else {
            counts[(t.floor() as usize).min(n_bins - 1)] += 1;
        }
    }
    Ok(Evaluation {
        regimen: regimen.weekly_doses,
        alpha: risk.alpha,
        n_mc: risk.n_mc,
        seed,
        ttp_samples_histogram: TtpHistogram {
            bin_width_days: 1.0,
            counts,
            end_of_simulation,
        },
        ttp_superquantile: -r.superquantile,
        ttp_quantile: -r.quantile,
        std_error: r.std_error,
        total_dose: regimen.total_dose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn arm_labels() {
        let cfg = RunConfig::preset(Scale::Desk, 0);
        assert_eq!(
            arms(&cfg),
            ["OUU:40", "OUU:50", "OUU:60", "OUU:70", "OUU:80", "OUU:100", "SOC"]
        );
    }
}
