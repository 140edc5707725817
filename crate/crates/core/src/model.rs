//! Logistic tumor growth with instantaneous radio-chemotherapy events.
//!
//! The cell count obeys `dN/dt = rho N (1 - N/K)` and is integrated with
//! forward Euler. On every treatment day the count is multiplied by the
//! linear-quadratic surviving fraction at the first grid point of that day,
//! before the Euler step that starts there.
//!
//! Trajectory values are left limits: the value recorded at a grid time is
//! the count *before* any event scheduled at that time. Observations and the
//! progression threshold read the trajectory the same way.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid_param, Result, TwinError};

pub const SOC_WEEKLY_DOSE: f64 = 2.0;
pub const MAX_WEEKLY_DOSE: f64 = 10.0;
pub const N_WEEKS: usize = 6;

/// The uncertain digital state `(rho, K, N_initial, alpha_RT)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientParameters {
    /// Proliferation rate, 1/day.
    pub rho: f64,
    /// Carrying capacity, cells.
    #[serde(rename = "K")]
    pub k: f64,
    /// Initial tumor burden, cells.
    #[serde(rename = "N_initial")]
    pub n_initial: f64,
    /// Radiosensitivity, 1/Gy.
    #[serde(rename = "alpha_RT")]
    pub alpha_rt: f64,
}

/// How strictly [`PatientParameters`] are checked before simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParameterCheck {
    /// All four parameters strictly positive.
    #[default]
    Strict,
    /// Zero is admitted for analytic test cases such as `rho = 0`.
    AllowZero,
}

impl PatientParameters {
    pub const NAMES: [&'static str; 4] = ["rho", "K", "N_initial", "alpha_RT"];

    pub fn new(rho: f64, k: f64, n_initial: f64, alpha_rt: f64) -> Result<Self> {
        let theta = Self {
            rho,
            k,
            n_initial,
            alpha_rt,
        };
        theta.validate(ParameterCheck::Strict)?;
        Ok(theta)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.rho, self.k, self.n_initial, self.alpha_rt]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            rho: v[0],
            k: v[1],
            n_initial: v[2],
            alpha_rt: v[3],
        }
    }

    pub fn validate(&self, check: ParameterCheck) -> Result<()> {
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            let ok = match check {
                ParameterCheck::Strict => value > 0.0 && value.is_finite(),
                ParameterCheck::AllowZero => value >= 0.0 && value.is_finite(),
            };
            if !ok {
                return Err(invalid_param(name, format!("must be positive, got {value}")));
            }
        }
        if self.k == 0.0 {
            return Err(invalid_param("K", "carrying capacity cannot be zero"));
        }
        Ok(())
    }
}

/// Case-study patients with known ground truth.
pub mod case_study {
    use super::PatientParameters;

    pub const PATIENT_1: PatientParameters = PatientParameters {
        rho: 1.14e-1,
        k: 1.17e11,
        n_initial: 1.54e10,
        alpha_rt: 1.05e-3,
    };
    pub const PATIENT_2: PatientParameters = PatientParameters {
        rho: 1.09e-1,
        k: 1.09e11,
        n_initial: 2.60e10,
        alpha_rt: 4.58e-2,
    };
    pub const PATIENT_3: PatientParameters = PatientParameters {
        rho: 2.25e-1,
        k: 1.40e11,
        n_initial: 2.62e10,
        alpha_rt: 3.90e-2,
    };

    pub fn all() -> [PatientParameters; 3] {
        [PATIENT_1, PATIENT_2, PATIENT_3]
    }

    pub fn by_number(n: usize) -> Option<PatientParameters> {
        match n {
            1 => Some(PATIENT_1),
            2 => Some(PATIENT_2),
            3 => Some(PATIENT_3),
            _ => None,
        }
    }
}

/// Parameters shared by every patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedParameters {
    /// Surviving fraction after one chemotherapy dose.
    pub s_c: f64,
    /// `alpha_RT / beta_RT`, Gy.
    pub alpha_beta_ratio: f64,
}

impl Default for FixedParameters {
    fn default() -> Self {
        Self {
            s_c: 0.82,
            alpha_beta_ratio: 10.0,
        }
    }
}

impl FixedParameters {
    pub fn beta_rt(&self, alpha_rt: f64) -> f64 {
        alpha_rt / self.alpha_beta_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_c > 0.0 && self.s_c <= 1.0) {
            return Err(invalid_param("S_C", format!("must lie in (0, 1], got {}", self.s_c)));
        }
        if !(self.alpha_beta_ratio > 0.0 && self.alpha_beta_ratio.is_finite()) {
            return Err(invalid_param(
                "alpha_beta_ratio",
                format!("must be positive, got {}", self.alpha_beta_ratio),
            ));
        }
        Ok(())
    }
}

/// Linear-quadratic surviving fraction of one treatment event, with the
/// chemotherapy factor applied when `chemo_active`.
pub fn surviving_fraction(
    dose: f64,
    alpha_rt: f64,
    fixed: &FixedParameters,
    chemo_active: bool,
) -> Result<f64> {
    if !(dose >= 0.0 && dose.is_finite()) {
        return Err(invalid_param("dose", format!("must be nonnegative, got {dose}")));
    }
    Ok(surviving_fraction_unchecked(dose, alpha_rt, fixed, chemo_active))
}

#[inline]
fn surviving_fraction_unchecked(
    dose: f64,
    alpha_rt: f64,
    fixed: &FixedParameters,
    chemo_active: bool,
) -> f64 {
    let chemo = if chemo_active { fixed.s_c } else { 1.0 };
    let beta = fixed.beta_rt(alpha_rt);
    chemo * (-alpha_rt * dose - beta * dose * dose).exp()
}

fn default_start_day() -> u32 {
    20
}

fn default_days_per_week() -> u32 {
    5
}

fn default_chemo() -> bool {
    true
}

/// Six weekly fractionated doses (Gy/day) and the calendar they run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRegimen {
    pub weekly_doses: [f64; N_WEEKS],
    #[serde(default = "default_start_day")]
    pub treatment_start_day: u32,
    #[serde(default = "default_days_per_week")]
    pub treatment_days_per_week: u32,
    /// Concurrent chemotherapy on every treatment day.
    #[serde(default = "default_chemo")]
    pub chemo: bool,
}

impl TreatmentRegimen {
    /// Clinical regimen: week 1 at the standard 2 Gy/day, weeks 2-6 in `[0, 10]`.
    pub fn new(weekly_doses: [f64; N_WEEKS]) -> Result<Self> {
        let r = Self::unconstrained(weekly_doses, true);
        r.validate()?;
        Ok(r)
    }

    /// Regimen built from the five optimizable weeks `u_2..u_6`.
    pub fn from_tail(tail: [f64; N_WEEKS - 1]) -> Result<Self> {
        let mut doses = [SOC_WEEKLY_DOSE; N_WEEKS];
        doses[1..].copy_from_slice(&tail);
        Self::new(doses)
    }

    /// Any nonnegative schedule; used for analytic and limiting cases.
    pub fn unconstrained(weekly_doses: [f64; N_WEEKS], chemo: bool) -> Self {
        Self {
            weekly_doses,
            treatment_start_day: default_start_day(),
            treatment_days_per_week: default_days_per_week(),
            chemo,
        }
    }

    /// Standard of care: 30 x 2 Gy with concurrent chemotherapy.
    pub fn standard_of_care() -> Self {
        Self::unconstrained([SOC_WEEKLY_DOSE; N_WEEKS], true)
    }

    /// No radiation and no chemotherapy.
    pub fn untreated() -> Self {
        Self::unconstrained([0.0; N_WEEKS], false)
    }

    pub fn tail(&self) -> [f64; N_WEEKS - 1] {
        let mut t = [0.0; N_WEEKS - 1];
        t.copy_from_slice(&self.weekly_doses[1..]);
        t
    }

    pub fn l1_norm(&self) -> f64 {
        self.weekly_doses.iter().map(|u| u.abs()).sum()
    }

    /// Total delivered dose in Gy.
    pub fn total_dose(&self) -> f64 {
        self.treatment_days_per_week as f64 * self.l1_norm()
    }

    /// Checks only what the integrator needs.
    pub fn validate_schedule(&self) -> Result<()> {
        if self.treatment_days_per_week == 0 || self.treatment_days_per_week > 7 {
            return Err(TwinError::InvalidRegimen(format!(
                "treatment days per week must be in 1..=7, got {}",
                self.treatment_days_per_week
            )));
        }
        for (i, &u) in self.weekly_doses.iter().enumerate() {
            if !(u >= 0.0 && u.is_finite()) {
                return Err(TwinError::InvalidRegimen(format!(
                    "week {} dose must be nonnegative, got {u}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Full clinical invariants: `u_1 = 2` and `0 <= u_i <= 10`.
    pub fn validate(&self) -> Result<()> {
        self.validate_schedule()?;
        if self.weekly_doses[0] != SOC_WEEKLY_DOSE {
            return Err(TwinError::InvalidRegimen(format!(
                "first week is fixed at {SOC_WEEKLY_DOSE} Gy/day, got {}",
                self.weekly_doses[0]
            )));
        }
        for (i, &u) in self.weekly_doses.iter().enumerate().skip(1) {
            if u > MAX_WEEKLY_DOSE {
                return Err(TwinError::InvalidRegimen(format!(
                    "week {} dose {u} exceeds {MAX_WEEKLY_DOSE} Gy/day",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Time discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationGrid {
    /// Step size in days.
    pub dt: f64,
    /// Horizon in days.
    pub t_end: f64,
}

impl Default for SimulationGrid {
    fn default() -> Self {
        Self {
            dt: 0.2,
            t_end: 152.0,
        }
    }
}

impl SimulationGrid {
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        let g = Self { dt, t_end };
        g.steps_per_day()?;
        g.n_steps()?;
        Ok(g)
    }

    /// Number of steps in one day; fails unless `dt` divides one day.
    pub fn steps_per_day(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(TwinError::InvalidGrid(format!(
                "dt must lie in (0, 1], got {}",
                self.dt
            )));
        }
        let n = (1.0 / self.dt).round();
        if ((n * self.dt) - 1.0).abs() > 1e-9 {
            return Err(TwinError::InvalidGrid(format!(
                "dt = {} does not divide one day",
                self.dt
            )));
        }
        Ok(n as usize)
    }

    /// Total number of Euler steps over `[0, t_end]`.
    pub fn n_steps(&self) -> Result<usize> {
        let spd = self.steps_per_day()?;
        if !(self.t_end > 0.0 && self.t_end.fract() == 0.0) {
            return Err(TwinError::InvalidGrid(format!(
                "horizon must be a positive whole number of days, got {}",
                self.t_end
            )));
        }
        Ok(self.t_end as usize * spd)
    }

    /// Grid index of the start of `day`.
    pub fn day_index(&self, day: u32) -> Result<usize> {
        Ok(day as usize * self.steps_per_day()?)
    }
}

/// One treatment event at the start of `day`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEvent {
    pub day: u32,
    pub dose: f64,
    pub chemo: bool,
}

/// Treatment calendar: in week `k`, the first `treatment_days_per_week` days
/// of `[start + 7(k-1), start + 7k)` each receive dose `u_k`. Chemotherapy
/// accompanies every event, including zero-dose weeks. Events past the grid
/// horizon are dropped.
pub fn event_schedule(regimen: &TreatmentRegimen, grid: &SimulationGrid) -> Result<Vec<TreatmentEvent>> {
    regimen.validate_schedule()?;
    grid.n_steps()?;
    let mut events = Vec::with_capacity(N_WEEKS * regimen.treatment_days_per_week as usize);
    for (week, &dose) in regimen.weekly_doses.iter().enumerate() {
        let week_start = regimen.treatment_start_day + 7 * week as u32;
        for d in 0..regimen.treatment_days_per_week {
            let day = week_start + d;
            if (day as f64) < grid.t_end {
                events.push(TreatmentEvent {
                    day,
                    dose,
                    chemo: regimen.chemo,
                });
            }
        }
    }
    Ok(events)
}

/// Simulated tumor burden on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(skip)]
    steps_per_day: usize,
}

impl Trajectory {
    /// Count at the start of `day`, before that day's treatment.
    pub fn at_day(&self, day: u32) -> Option<f64> {
        self.values.get(day as usize * self.steps_per_day).copied()
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("trajectory is never empty")
    }

    /// `(day, N)` at every whole day.
    pub fn day_boundaries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.values
            .iter()
            .step_by(self.steps_per_day)
            .enumerate()
            .map(|(d, &n)| (d as u32, n))
    }

    /// CSV with columns `t_days,N_cells`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_days,N_cells")?;
        for (t, n) in self.times.iter().zip(&self.values) {
            writeln!(w, "{t},{n:e}")?;
        }
        Ok(())
    }
}

/// A regimen laid out on a specific grid, ready for repeated integration
/// under many parameter draws.
#[derive(Debug, Clone)]
pub struct CompiledRegimen {
    steps_per_day: usize,
    n_steps: usize,
    dt: f64,
    /// `(grid index, dose, chemo)`, sorted by index.
    events: Vec<(usize, f64, bool)>,
}

impl CompiledRegimen {
    pub fn new(regimen: &TreatmentRegimen, grid: &SimulationGrid) -> Result<Self> {
        let steps_per_day = grid.steps_per_day()?;
        let n_steps = grid.n_steps()?;
        let events = event_schedule(regimen, grid)?
            .into_iter()
            .map(|e| (e.day as usize * steps_per_day, e.dose, e.chemo))
            .collect();
        Ok(Self {
            steps_per_day,
            n_steps,
            dt: grid.dt,
            events,
        })
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Integrate from `(start_index, start_value)` to the horizon, calling
    /// `visit(index, value)` with the pre-event value at every grid index.
    /// Integration stops early when `visit` returns `false`.
    ///
    /// Parameters are not validated here; callers go through
    /// [`simulate`] or validate once per parameter set.
    #[inline]
    pub fn integrate<F>(
        &self,
        theta: &PatientParameters,
        fixed: &FixedParameters,
        start_index: usize,
        start_value: f64,
        mut visit: F,
    ) where
        F: FnMut(usize, f64) -> bool,
    {
        let growth = theta.rho * self.dt;
        let inv_k = 1.0 / theta.k;
        let mut next_event = self.events.partition_point(|e| e.0 < start_index);
        let mut n = start_value;
        for i in start_index..self.n_steps {
            if !visit(i, n) {
                return;
            }
            while let Some(&(idx, dose, chemo)) = self.events.get(next_event) {
                if idx != i {
                    break;
                }
                n *= surviving_fraction_unchecked(dose, theta.alpha_rt, fixed, chemo);
                next_event += 1;
            }
            n += growth * n * (1.0 - n * inv_k);
        }
        visit(self.n_steps, n);
    }

    /// Pre-event value at grid index `index`.
    pub fn value_at(&self, theta: &PatientParameters, fixed: &FixedParameters, index: usize) -> f64 {
        let mut out = theta.n_initial;
        self.integrate(theta, fixed, 0, theta.n_initial, |i, n| {
            out = n;
            i < index
        });
        out
    }
}

/// Forward-Euler simulation over `[0, t_end]`.
pub fn simulate(
    theta: &PatientParameters,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    grid: &SimulationGrid,
) -> Result<Trajectory> {
    simulate_checked(theta, fixed, regimen, grid, ParameterCheck::Strict)
}

/// [`simulate`] with an explicit parameter check; `AllowZero` is the test
/// mode that admits boundary values.
pub fn simulate_checked(
    theta: &PatientParameters,
    fixed: &FixedParameters,
    regimen: &TreatmentRegimen,
    grid: &SimulationGrid,
    check: ParameterCheck,
) -> Result<Trajectory> {
    theta.validate(check)?;
    fixed.validate()?;
    let compiled = CompiledRegimen::new(regimen, grid)?;
    let spd = compiled.steps_per_day();
    let mut values = Vec::with_capacity(compiled.n_steps() + 1);
    compiled.integrate(theta, fixed, 0, theta.n_initial, |_, n| {
        values.push(n);
        true
    });
    let times = (0..values.len()).map(|i| i as f64 / spd as f64).collect();
    Ok(Trajectory {
        times,
        values,
        steps_per_day: spd,
    })
}

/// Closed-form logistic solution without treatment.
pub fn logistic_solution(theta: &PatientParameters, t: f64) -> f64 {
    theta.k / (1.0 + (theta.k / theta.n_initial - 1.0) * (-theta.rho * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta(rho: f64, k: f64, n0: f64, a: f64) -> PatientParameters {
        PatientParameters {
            rho,
            k,
            n_initial: n0,
            alpha_rt: a,
        }
    }

    #[test]
    fn surviving_fraction_examples() {
        let fixed = FixedParameters::default();
        assert_eq!(surviving_fraction(0.0, 0.05, &fixed, true).unwrap(), 0.82);
        assert_eq!(surviving_fraction(0.0, 0.05, &fixed, false).unwrap(), 1.0);
        let s = surviving_fraction(2.0, 0.05, &fixed, true).unwrap();
        // 0.82 * exp(-(0.05 * 2 + 0.005 * 4))
        assert!((s - 0.82 * (-0.12f64).exp()).abs() < 1e-15);
        assert!((s - 0.727275).abs() < 5e-7);
        assert!(surviving_fraction(-1.0, 0.05, &fixed, true).is_err());
    }

    #[test]
    fn soc_schedule_has_thirty_events() {
        let events = event_schedule(&TreatmentRegimen::standard_of_care(), &SimulationGrid::default()).unwrap();
        assert_eq!(events.len(), 30);
        let days: Vec<u32> = events.iter().map(|e| e.day).collect();
        let mut expected = Vec::new();
        for week in 0..6 {
            for d in 0..5 {
                expected.push(20 + 7 * week + d);
            }
        }
        assert_eq!(days, expected);
        assert_eq!(days.first(), Some(&20));
        assert_eq!(days.last(), Some(&59));
        assert!(events.iter().all(|e| e.dose == 2.0 && e.chemo));
    }

    #[test]
    fn zero_weeks_still_carry_chemo() {
        let r = TreatmentRegimen::new([2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let events = event_schedule(&r, &SimulationGrid::default()).unwrap();
        assert_eq!(events.len(), 30);
        assert!(events[..5].iter().all(|e| e.dose == 2.0 && (20..=24).contains(&e.day)));
        assert!(events[5..].iter().all(|e| e.dose == 0.0 && e.chemo));
    }

    #[test]
    fn regimen_validation() {
        assert!(TreatmentRegimen::new([2.0; 6]).is_ok());
        assert!(TreatmentRegimen::new([3.0, 2.0, 2.0, 2.0, 2.0, 2.0]).is_err());
        assert!(TreatmentRegimen::new([2.0, 10.5, 2.0, 2.0, 2.0, 2.0]).is_err());
        assert!(TreatmentRegimen::new([2.0, -0.1, 2.0, 2.0, 2.0, 2.0]).is_err());
        assert_eq!(TreatmentRegimen::standard_of_care().total_dose(), 60.0);
        assert_eq!(TreatmentRegimen::from_tail([0.0; 5]).unwrap().total_dose(), 10.0);
    }

    #[test]
    fn grid_validation() {
        assert_eq!(SimulationGrid::default().steps_per_day().unwrap(), 5);
        assert_eq!(SimulationGrid::default().n_steps().unwrap(), 760);
        assert!(SimulationGrid::new(0.3, 152.0).is_err());
        assert!(SimulationGrid::new(0.0, 152.0).is_err());
        assert!(SimulationGrid::new(0.001, 152.0).is_ok());
        assert!(SimulationGrid::new(0.2, 152.5).is_err());
    }

    #[test]
    fn zero_growth_is_constant() {
        let th = theta(0.0, 1e11, 2e10, 0.05);
        let traj = simulate_checked(
            &th,
            &FixedParameters::default(),
            &TreatmentRegimen::untreated(),
            &SimulationGrid::default(),
            ParameterCheck::AllowZero,
        )
        .unwrap();
        assert_eq!(traj.values.len(), 761);
        assert!(traj.values.iter().all(|&n| n == 2e10));
        // Production paths refuse the boundary value.
        assert!(simulate(&th, &FixedParameters::default(), &TreatmentRegimen::untreated(), &SimulationGrid::default()).is_err());
    }

    #[test]
    fn carrying_capacity_is_fixed_point() {
        let th = theta(0.1, 1e11, 1e11, 0.05);
        let traj = simulate(&th, &FixedParameters::default(), &TreatmentRegimen::untreated(), &SimulationGrid::default()).unwrap();
        assert!(traj.values.iter().all(|&n| n == 1e11));
    }

    #[test]
    fn treatment_applies_at_start_of_day() {
        // With rho tiny the count only changes through events.
        let th = theta(1e-12, 1e11, 1e10, 0.05);
        let fixed = FixedParameters::default();
        let traj = simulate(&th, &fixed, &TreatmentRegimen::standard_of_care(), &SimulationGrid::default()).unwrap();
        let s = surviving_fraction(2.0, 0.05, &fixed, true).unwrap();
        let before = traj.at_day(20).unwrap();
        let next = traj.values[20 * 5 + 1];
        assert!((before - 1e10).abs() < 1.0);
        assert!((next / before - s).abs() < 1e-9);
        // Day 27 sees the five events of week one and none of week two.
        let d27 = traj.at_day(27).unwrap();
        assert!((d27 / 1e10 - s.powi(5)).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let fixed = FixedParameters::default();
        let r = TreatmentRegimen::standard_of_care();
        let g = SimulationGrid::default();
        assert!(simulate(&theta(-0.1, 1e11, 1e10, 0.05), &fixed, &r, &g).is_err());
        assert!(simulate(&theta(0.1, 0.0, 1e10, 0.05), &fixed, &r, &g).is_err());
        assert!(simulate(&theta(0.1, 1e11, 1e10, 0.0), &fixed, &r, &g).is_err());
        let bad_grid = SimulationGrid { dt: 0.3, t_end: 152.0 };
        assert!(simulate(&theta(0.1, 1e11, 1e10, 0.05), &fixed, &r, &bad_grid).is_err());
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let traj = simulate(&case_study::PATIENT_3, &FixedParameters::default(), &TreatmentRegimen::standard_of_care(), &SimulationGrid::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 762);
        assert!(text.starts_with("t_days,N_cells\n0,"));
    }
}
