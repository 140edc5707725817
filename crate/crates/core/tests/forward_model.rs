use oncotwin_core::cohort::PriorSpec;
use oncotwin_core::model::{
    case_study, logistic_solution, simulate, simulate_checked, FixedParameters, ParameterCheck,
    PatientParameters, SimulationGrid, TreatmentRegimen,
};
use oncotwin_core::seed;
use proptest::prelude::*;

/// Reference integrator: fine forward Euler, events applied at the start of
/// each treatment day, values recorded before the day's event.
fn reference_day_values(theta: &PatientParameters, regimen: &TreatmentRegimen, dt_per_day: usize, days: usize) -> Vec<f64> {
    let dt = 1.0 / dt_per_day as f64;
    let beta = theta.alpha_rt / 10.0;
    let mut out = Vec::with_capacity(days + 1);
    let mut n = theta.n_initial;
    for day in 0..days {
        out.push(n);
        let rel = day as i64 - 20;
        if rel >= 0 && rel < 42 && rel % 7 < 5 {
            let u = regimen.weekly_doses[(rel / 7) as usize];
            n *= 0.82 * (-theta.alpha_rt * u - beta * u * u).exp();
        }
        for _ in 0..dt_per_day {
            n += dt * theta.rho * n * (1.0 - n / theta.k);
        }
    }
    out.push(n);
    out
}

fn max_day_boundary_error(theta: &PatientParameters, dt: f64) -> f64 {
    let soc = TreatmentRegimen::standard_of_care();
    let grid = SimulationGrid::new(dt, 152.0).unwrap();
    let traj = simulate(theta, &FixedParameters::default(), &soc, &grid).unwrap();
    let fine = reference_day_values(theta, &soc, 1000, 152);
    traj.day_boundaries()
        .map(|(day, n)| (n - fine[day as usize]).abs() / fine[day as usize])
        .fold(0.0, f64::max)
}

#[test]
fn euler_error_is_first_order() {
    for theta in case_study::all() {
        let e1 = max_day_boundary_error(&theta, 0.2);
        let e2 = max_day_boundary_error(&theta, 0.1);
        let e3 = max_day_boundary_error(&theta, 0.05);
        for ratio in [e1 / e2, e2 / e3] {
            assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
        }
    }
}

#[test]
fn fine_grid_matches_reference_integrator() {
    let grid = SimulationGrid::new(0.001, 152.0).unwrap();
    let soc = TreatmentRegimen::standard_of_care();
    let theta = case_study::PATIENT_2;
    let traj = simulate(&theta, &FixedParameters::default(), &soc, &grid).unwrap();
    let fine = reference_day_values(&theta, &soc, 1000, 152);
    for (day, n) in traj.day_boundaries() {
        let r = fine[day as usize];
        assert!((n - r).abs() / r < 1e-12, "day {day}");
    }
}

#[test]
fn untreated_matches_closed_form() {
    let start = std::time::Instant::now();
    let prior = PriorSpec::default();
    let mut rng = seed::stream(11, &[1]);
    let untreated = TreatmentRegimen::untreated();
    for _ in 0..100 {
        let theta = prior.sample(&mut rng);
        let traj = simulate(&theta, &FixedParameters::default(), &untreated, &SimulationGrid::default()).unwrap();
        let exact = theta.k / (1.0 + (theta.k / theta.n_initial - 1.0) * (-theta.rho * 152.0).exp());
        assert!((traj.last() - exact).abs() / exact < 0.01);
        assert!((logistic_solution(&theta, 152.0) - exact).abs() <= 1e-6 * exact);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn zero_growth_and_untreated_are_flat() {
    let theta = PatientParameters {
        rho: 0.0,
        ..case_study::PATIENT_3
    };
    let traj = simulate_checked(
        &theta,
        &FixedParameters::default(),
        &TreatmentRegimen::untreated(),
        &SimulationGrid::default(),
        ParameterCheck::AllowZero,
    )
    .unwrap();
    assert_eq!(traj.values.len(), 761);
    assert!(traj.values.iter().all(|n| *n == theta.n_initial));
    assert!(simulate(&theta, &FixedParameters::default(), &TreatmentRegimen::untreated(), &SimulationGrid::default()).is_err());
}

fn theta_strategy() -> impl Strategy<Value = PatientParameters> {
    (0.01f64..0.2, 5e10f64..2e11, 5e9f64..4e10, 0.001f64..0.1).prop_map(|(rho, k, n0, a)| PatientParameters {
        rho,
        k,
        n_initial: n0,
        alpha_rt: a,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn burden_stays_in_bounds(theta in theta_strategy(), tail in prop::array::uniform5(0.0f64..10.0)) {
        let regimen = TreatmentRegimen::from_tail(tail).unwrap();
        let traj = simulate(&theta, &FixedParameters::default(), &regimen, &SimulationGrid::default()).unwrap();
        for n in &traj.values {
            prop_assert!(*n > 0.0 && *n <= theta.k.max(theta.n_initial) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn more_dose_never_grows_the_tumor(theta in theta_strategy(), tail in prop::array::uniform5(0.0f64..9.0), extra in prop::array::uniform5(0.0f64..1.0)) {
        let low = TreatmentRegimen::from_tail(tail).unwrap();
        let mut high_tail = tail;
        for (h, e) in high_tail.iter_mut().zip(extra) {
            *h += e;
        }
        let high = TreatmentRegimen::from_tail(high_tail).unwrap();
        let f = FixedParameters::default();
        let g = SimulationGrid::default();
        let a = simulate(&theta, &f, &low, &g).unwrap();
        let b = simulate(&theta, &f, &high, &g).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(y <= x);
        }
    }
}
