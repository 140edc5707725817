//! Risk-averse dose optimization under uncertainty.
//!
//! For each total-dose cap the weekly doses `u_2..u_6` minimize
//! `superquantile(-TTP) + lambda * |u|_1` over a frozen set of posterior
//! draws, using multi-start COBYLA. Reported TTP superquantiles are
//! re-evaluated on an independent set.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::io::Write;

use cobyla::{minimize, RhoBeg, StopTols};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::PosteriorEnsemble;
use crate::error::{Result, TwinError};
use crate::model::{
    FixedParameters, SimulationGrid, TreatmentRegimen, MAX_WEEKLY_DOSE, N_WEEKS, SOC_WEEKLY_DOSE,
};
use crate::risk::{risk_summary, ThetaSet, TtpConfig};
use crate::seed;

const N_VARS: usize = N_WEEKS - 1;
const FEASIBILITY_TOL: f64 = 1e-9;
/// Total dose of standard of care, Gy.
pub const SOC_TOTAL_DOSE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Total-dose caps, Gy.
    pub d_max_grid: Vec<f64>,
    pub lambda: f64,
    pub restarts: usize,
    pub max_evals_per_restart: usize,
    pub n_mc: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl OptimizationConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            d_max_grid: vec![40.0, 50.0, 60.0, 70.0, 80.0, 100.0],
            lambda: 0.001,
            restarts: 5,
            max_evals_per_restart: 100,
            n_mc: 1000,
            alpha: 0.95,
            seed,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            restarts: 20,
            max_evals_per_restart: 200,
            n_mc: 5000,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min = SOC_WEEKLY_DOSE * 5.0;
        if let Some(d) = self.d_max_grid.iter().find(|d| !(**d >= min && d.is_finite())) {
            return Err(TwinError::InvalidConfig(format!("dose cap {d} Gy is below {min} Gy")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TwinError::InvalidConfig(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.restarts == 0 || self.max_evals_per_restart == 0 {
            return Err(TwinError::InvalidConfig("restarts and evaluation budget must be positive".into()));
        }
        crate::risk::RiskConfig {
            alpha: self.alpha,
            n_mc: self.n_mc,
        }
        .validate()
    }
}

/// One optimized regimen on the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub d_max: f64,
    pub regimen: TreatmentRegimen,
    pub total_dose: f64,
    /// Objective on the frozen set.
    pub objective: f64,
    /// TTP superquantile on the report set, days.
    pub ttp_superquantile: f64,
    /// Monte Carlo standard error of `ttp_superquantile`.
    pub std_error: f64,
    pub restarts: usize,
    pub evaluations: usize,
}

/// A cap for which no point could be produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoGap {
    pub d_max: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub points: Vec<ParetoPoint>,
    pub soc_reference: ParetoPoint,
    #[serde(default)]
    pub gaps: Vec<ParetoGap>,
}

impl ParetoFront {
    pub fn point(&self, d_max: f64) -> Option<&ParetoPoint> {
        self.points.iter().find(|p| p.d_max == d_max)
    }

    /// Columns: patient_id, d_max_gy, u1..u6, total_dose_gy,
    /// ttp_superquantile_days, objective. SOC is written with `d_max_gy = SOC`.
    pub fn write_csv<W: Write>(&self, patient_id: &str, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "patient_id,d_max_gy,u1,u2,u3,u4,u5,u6,total_dose_gy,ttp_superquantile_days,objective"
        )?;
        let row = |w: &mut W, label: String, p: &ParetoPoint| -> std::io::Result<()> {
            write!(w, "{patient_id},{label}")?;
            for u in p.regimen.weekly_doses {
                write!(w, ",{u}")?;
            }
            writeln!(w, ",{},{},{}", p.total_dose, p.ttp_superquantile, p.objective)
        };
        for p in &self.points {
            row(&mut w, p.d_max.to_string(), p)?;
        }
        row(&mut w, "SOC".to_string(), &self.soc_reference)
    }
}

/// `superquantile(-TTP) + lambda * |u|_1` over a frozen draw set.
pub fn objective(regimen: &TreatmentRegimen, set: &ThetaSet, alpha: f64, lambda: f64) -> Result<f64> {
    regimen.validate()?;
    unchecked_objective(regimen, set, alpha, lambda)
}

fn unchecked_objective(regimen: &TreatmentRegimen, set: &ThetaSet, alpha: f64, lambda: f64) -> Result<f64> {
    let m: Vec<f64> = set.ttp(regimen)?.into_iter().map(|t| -t).collect();
    Ok(risk_summary(&m, alpha)?.superquantile + lambda * regimen.l1_norm())
}

/// Budget on `u_2 + ... + u_6` implied by a total-dose cap.
fn tail_budget(d_max: f64) -> f64 {
    d_max / 5.0 - SOC_WEEKLY_DOSE
}

fn regimen_of(x: &[f64]) -> Result<TreatmentRegimen> {
    let mut tail = [0.0; N_VARS];
    for (t, v) in tail.iter_mut().zip(x) {
        *t = v.clamp(0.0, MAX_WEEKLY_DOSE);
    }
    TreatmentRegimen::from_tail(tail)
}

fn is_feasible(x: &[f64], budget: f64) -> bool {
    x.iter().all(|v| (0.0..=MAX_WEEKLY_DOSE).contains(v)) && x.iter().sum::<f64>() <= budget + FEASIBILITY_TOL
}

/// Standard of care scaled down to fit the budget.
fn soc_start(budget: f64) -> [f64; N_VARS] {
    let soc_sum = SOC_WEEKLY_DOSE * N_VARS as f64;
    let scale = (budget / soc_sum).min(1.0);
    [SOC_WEEKLY_DOSE * scale; N_VARS]
}

/// Uniform draw from `{x in [0, 10]^5 : sum(x) <= budget}`.
fn uniform_feasible(budget: f64, rng: &mut ChaCha8Rng) -> [f64; N_VARS] {
    let box_sum = MAX_WEEKLY_DOSE * N_VARS as f64;
    loop {
        let mut x = [0.0; N_VARS];
        if budget < box_sum / 2.0 {
            // Uniform on the simplex via normalized exponential spacings.
            let mut e = [0.0; N_VARS + 1];
            for v in e.iter_mut() {
                *v = -(1.0 - rng.random::<f64>()).ln();
            }
            let total: f64 = e.iter().sum();
            for (xi, ei) in x.iter_mut().zip(e) {
                *xi = budget * ei / total;
            }
        } else {
            for xi in x.iter_mut() {
                *xi = rng.random::<f64>() * MAX_WEEKLY_DOSE;
            }
        }
        if is_feasible(&x, budget) {
            return x;
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    x: [f64; N_VARS],
    objective: f64,
}

impl Candidate {
    fn total(&self) -> f64 {
        self.x.iter().sum()
    }

    /// Lower objective, then lower dose, then the lexicographically earlier vector.
    fn cmp(&self, other: &Self) -> Ordering {
        self.objective
            .total_cmp(&other.objective)
            .then(self.total().total_cmp(&other.total()))
            .then_with(|| {
                self.x
                    .iter()
                    .zip(&other.x)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

struct RestartOutcome {
    best: Option<Candidate>,
    evaluations: usize,
}

fn run_restart(
    start: [f64; N_VARS],
    budget: f64,
    set: &ThetaSet,
    cfg: &OptimizationConfig,
) -> Result<RestartOutcome> {
    let best: RefCell<Option<Candidate>> = RefCell::new(None);
    let error: RefCell<Option<TwinError>> = RefCell::new(None);
    let evaluations = RefCell::new(0usize);

    let eval = |x: &[f64], _: &mut ()| -> f64 {
        *evaluations.borrow_mut() += 1;
        let value = regimen_of(x).and_then(|r| unchecked_objective(&r, set, cfg.alpha, cfg.lambda));
        match value {
            Ok(v) => {
                if is_feasible(x, budget) {
                    let mut xa = [0.0; N_VARS];
                    xa.copy_from_slice(x);
                    let c = Candidate { x: xa, objective: v };
                    let mut b = best.borrow_mut();
                    if b.as_ref().is_none_or(|cur| c.cmp(cur).is_lt()) {
                        *b = Some(c);
                    }
                }
                v
            }
            Err(e) => {
                error.borrow_mut().get_or_insert(e);
                f64::INFINITY
            }
        }
    };

    // The start point is always scored so the best point never loses to it.
    eval(&start, &mut ());
    if cfg.max_evals_per_restart > 1 {
        let budget_con = |x: &[f64], _: &mut ()| budget - x.iter().sum::<f64>();
        let bounds = [(0.0, MAX_WEEKLY_DOSE); N_VARS];
        let tols = StopTols {
            xtol_abs: vec![1e-4; N_VARS],
            ..StopTols::default()
        };
        // Failure statuses still leave every evaluated point recorded.
        let _ = minimize(
            eval,
            &start,
            &bounds,
            &[budget_con],
            (),
            cfg.max_evals_per_restart - 1,
            RhoBeg::All(1.0),
            Some(tols),
        );
    }
    if let Some(e) = error.into_inner() {
        return Err(e);
    }
    Ok(RestartOutcome {
        best: best.into_inner(),
        evaluations: evaluations.into_inner(),
    })
}

/// Frozen and report draw sets for one patient.
pub struct EvaluationSets {
    pub frozen: ThetaSet,
    pub report: ThetaSet,
}

impl EvaluationSets {
    pub fn draw(
        ensemble: &PosteriorEnsemble,
        cfg: &OptimizationConfig,
        fixed: FixedParameters,
        grid: SimulationGrid,
        ttp: TtpConfig,
    ) -> Result<Self> {
        let frozen_seed = seed::derive(cfg.seed, &[seed::OPTIMIZER_FROZEN]);
        Ok(Self {
            frozen: ThetaSet::draw(ensemble, cfg.n_mc, frozen_seed, fixed, grid, ttp)?,
            report: report_set(ensemble, cfg, fixed, grid, ttp)?,
        })
    }

    fn report_point(
        &self,
        d_max: f64,
        regimen: TreatmentRegimen,
        objective: f64,
        cfg: &OptimizationConfig,
        restarts: usize,
        evaluations: usize,
    ) -> Result<ParetoPoint> {
        let m: Vec<f64> = self.report.ttp(&regimen)?.into_iter().map(|t| -t).collect();
        let r = risk_summary(&m, cfg.alpha)?;
        Ok(ParetoPoint {
            d_max,
            total_dose: regimen.total_dose(),
            regimen,
            objective,
            ttp_superquantile: -r.superquantile,
            std_error: r.std_error,
            restarts,
            evaluations,
        })
    }

    /// Standard of care scored like a front point.
    pub fn soc_reference(&self, cfg: &OptimizationConfig) -> Result<ParetoPoint> {
        let soc = TreatmentRegimen::standard_of_care();
        let obj = objective(&soc, &self.frozen, cfg.alpha, cfg.lambda)?;
        self.report_point(SOC_TOTAL_DOSE, soc, obj, cfg, 0, 1)
    }

    /// Best regimen under the cap `5 |u|_1 <= d_max`.
    pub fn optimize(&self, d_max: f64, cfg: &OptimizationConfig) -> Result<ParetoPoint> {
        let min = SOC_WEEKLY_DOSE * 5.0;
        if !(d_max >= min && d_max.is_finite()) {
            return Err(TwinError::InvalidConfig(format!("dose cap {d_max} Gy is below {min} Gy")));
        }
        let budget = tail_budget(d_max);
        let outcomes = (0..cfg.restarts)
            .into_par_iter()
            .map(|k| {
                let start = if k == 0 {
                    soc_start(budget)
                } else {
                    let mut rng = seed::stream(cfg.seed, &[seed::OPTIMIZER_RESTART, d_max.to_bits(), k as u64]);
                    uniform_feasible(budget, &mut rng)
                };
                run_restart(start, budget, &self.frozen, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let evaluations = outcomes.iter().map(|o| o.evaluations).sum();
        let best = outcomes
            .into_iter()
            .filter_map(|o| o.best)
            .min_by(|a, b| a.cmp(b))
            .ok_or_else(|| TwinError::Optimization(format!("no feasible point found for {d_max} Gy")))?;
        let regimen = regimen_of(&best.x)?;
        self.report_point(d_max, regimen, best.objective, cfg, cfg.restarts, evaluations)
    }
}

/// The independent draw set on which reported superquantiles are computed.
pub fn report_set(
    ensemble: &PosteriorEnsemble,
    cfg: &OptimizationConfig,
    fixed: FixedParameters,
    grid: SimulationGrid,
    ttp: TtpConfig,
) -> Result<ThetaSet> {
    let report_seed = seed::derive(cfg.seed, &[seed::OPTIMIZER_REPORT]);
    ThetaSet::draw(ensemble, cfg.n_mc, report_seed, fixed, grid, ttp)
}

/// Optimize one cap from scratch.
pub fn optimize_regimen(
    ensemble: &PosteriorEnsemble,
    d_max: f64,
    cfg: &OptimizationConfig,
    fixed: FixedParameters,
    grid: SimulationGrid,
    ttp: TtpConfig,
) -> Result<ParetoPoint> {
    cfg.validate()?;
    EvaluationSets::draw(ensemble, cfg, fixed, grid, ttp)?.optimize(d_max, cfg)
}

/// Every cap in the grid plus the SOC reference, all on one frozen set.
/// Failed caps become gaps.
pub fn pareto_sweep(
    ensemble: &PosteriorEnsemble,
    cfg: &OptimizationConfig,
    fixed: FixedParameters,
    grid: SimulationGrid,
    ttp: TtpConfig,
) -> Result<ParetoFront> {
    cfg.validate()?;
    let sets = EvaluationSets::draw(ensemble, cfg, fixed, grid, ttp)?;
    let mut caps = cfg.d_max_grid.clone();
    caps.sort_by(f64::total_cmp);
    caps.dedup();
    let results: Vec<_> = caps.par_iter().map(|&d| (d, sets.optimize(d, cfg))).collect();
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    for (d_max, r) in results {
        match r {
            Ok(p) => points.push(p),
            Err(e) => gaps.push(ParetoGap {
                d_max,
                reason: e.to_string(),
            }),
        }
    }
    Ok(ParetoFront {
        points,
        soc_reference: sets.soc_reference(cfg)?,
        gaps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedControl {
    /// `60 - total dose` of the cheapest qualifying point, Gy.
    pub reduction: f64,
    pub total_dose: Option<f64>,
    /// Set when no point matches SOC or the cheapest match exceeds 60 Gy.
    pub flagged: bool,
}

/// Dose saved by the cheapest front point whose TTP superquantile is within
/// `tolerance_days` of SOC.
pub fn matched_control_dose_reduction(front: &ParetoFront, tolerance_days: f64) -> Result<MatchedControl> {
    if front.points.is_empty() {
        return Err(TwinError::Empty("pareto front"));
    }
    let target = front.soc_reference.ttp_superquantile - tolerance_days;
    let cheapest = front
        .points
        .iter()
        .filter(|p| p.ttp_superquantile >= target)
        .map(|p| p.total_dose)
        .min_by(f64::total_cmp);
    Ok(match cheapest {
        Some(d) if d <= SOC_TOTAL_DOSE => MatchedControl {
            reduction: SOC_TOTAL_DOSE - d,
            total_dose: Some(d),
            flagged: false,
        },
        other => MatchedControl {
            reduction: 0.0,
            total_dose: other,
            flagged: true,
        },
    })
}
