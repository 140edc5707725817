use oncotwin_core::risk::QoiSamples;
use oncotwin_core::seed;
use oncotwin_core::survival::{
    chi2_1_sf, kaplan_meier, logrank, survival_variance_band, SurvivalInput, VarianceBand,
};
use proptest::prelude::*;
use rand::Rng;

fn input(ttps: &[f64]) -> SurvivalInput {
    let ids: Vec<String> = (0..ttps.len()).map(|i| format!("s{i}")).collect();
    SurvivalInput::from_ttps(&ids, ttps, 132.0).unwrap()
}

/// Regularized upper incomplete gamma `Q(1/2, x/2)`: series below `a + 1`,
/// Lentz continued fraction above.
fn chi2_1_tail_oracle(x: f64) -> f64 {
    let a = 0.5;
    let z = x / 2.0;
    if z <= 0.0 {
        return 1.0;
    }
    let ln_gamma_a = 0.5 * std::f64::consts::PI.ln();
    let prefactor = (-z + a * z.ln() - ln_gamma_a).exp();
    if z < a + 1.0 {
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= z / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * prefactor
    } else {
        let tiny = 1e-300;
        let mut b = z + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        prefactor * h
    }
}

#[test]
fn chi_square_tail_matches_series_oracle() {
    for i in 0..=400 {
        let x = i as f64 * 0.05;
        let (p, q) = (chi2_1_sf(x), chi2_1_tail_oracle(x));
        assert!((p - q).abs() <= 1e-10, "x = {x}: {p} vs {q}");
    }
    for x in [25.0, 30.0, 40.0] {
        let (p, q) = (chi2_1_sf(x), chi2_1_tail_oracle(x));
        assert!((p - q).abs() <= 1e-10 * q.max(1e-300) + 1e-300);
    }
}

#[test]
fn hand_computed_six_subject_logrank() {
    // Pooled event times 5, 10, 20, 30, 40; group a has events at 10 and 30.
    let a = input(&[10.0, 30.0, 132.0]);
    let b = input(&[5.0, 20.0, 40.0]);
    let r = logrank(&a, &b).unwrap();
    let expected = 3.0 / 6.0 + 3.0 / 5.0 + 2.0 / 4.0 + 2.0 / 3.0 + 1.0 / 2.0;
    let o_minus_e = 2.0 - expected;
    let v = 0.25 + 6.0 / 25.0 + 0.25 + 2.0 / 9.0 + 0.25;
    assert!((r.o_minus_e - o_minus_e).abs() < 1e-10);
    assert!((r.variance - v).abs() < 1e-10);
    assert!((r.statistic - o_minus_e * o_minus_e / v).abs() < 1e-10);
    assert!((r.p_value - chi2_1_tail_oracle(o_minus_e * o_minus_e / v)).abs() < 1e-10);
    assert_eq!((r.n_a, r.n_b), (3, 3));
    let swapped = logrank(&b, &a).unwrap();
    assert!((swapped.statistic - r.statistic).abs() < 1e-12);
}

#[test]
fn product_limit_hand_values() {
    let c = kaplan_meier(&input(&[10.0, 20.0, 132.0, 132.0])).unwrap();
    assert!((c.at(10.0) - 3.0 / 4.0).abs() < 1e-12);
    assert!((c.at(20.0) - 3.0 / 4.0 * 2.0 / 3.0).abs() < 1e-12);
    assert!((c.at(132.0) - 0.5).abs() < 1e-12);
    let ties = kaplan_meier(&input(&[10.0, 10.0, 132.0, 132.0])).unwrap();
    assert!((ties.at(10.0) - 0.5).abs() < 1e-12);
    assert_eq!(ties.steps.len(), 2);
}

fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    let n = pooled.len();
    let observed = logrank(&input(a), &input(b)).unwrap().statistic;
    let (mut hits, mut total) = (0usize, 0usize);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let ga: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).collect();
        let gb: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 0).map(|i| pooled[i]).collect();
        let s = logrank(&input(&ga), &input(&gb)).unwrap().statistic;
        total += 1;
        if s >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn agrees_with_exhaustive_permutation_test_at_eight_subjects() {
    let mut rng = seed::stream(17, &[0]);
    let mut gaps: Vec<f64> = (0..200)
        .map(|k| {
            let na = 3 + k % 2;
            let mut times: Vec<f64> = Vec::new();
            while times.len() < 8 {
                let t = rng.random_range(1..=130) as f64;
                if !times.contains(&t) {
                    times.push(t);
                }
            }
            let (a, b) = times.split_at(na);
            let chi = logrank(&input(a), &input(b)).unwrap().p_value;
            (chi - permutation_p(a, b)).abs()
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    assert!(gaps[100] < 0.07, "median gap {}", gaps[100]);
    assert!(gaps[180] <= 0.1, "90th percentile gap {}", gaps[180]);
}

#[test]
fn identical_groups_give_unit_p() {
    let g = input(&[12.0, 40.0, 40.0, 80.0, 132.0]);
    let r = logrank(&g, &g).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0);
}

fn patient_samples(center: f64, spread: f64, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> QoiSamples {
    let values = (0..n)
        .map(|_| -(center + spread * (rng.random::<f64>() - 0.5)).clamp(0.2, 132.0))
        .collect();
    QoiSamples { values, n_mc: n, seed: 0 }
}

#[test]
fn band_shrinks_with_sample_count() {
    let times = VarianceBand::grid(132.0, 0.2);
    let width = |n: usize| {
        let mut rng = seed::stream(2, &[n as u64]);
        let samples: Vec<_> = (0..30).map(|i| patient_samples(20.0 + 3.0 * i as f64, 40.0, n, &mut rng)).collect();
        let band = survival_variance_band(&samples, 0.95, 400, 3, 132.0, &times).unwrap();
        band.std_dev.iter().sum::<f64>()
    };
    let ratio = width(400) / width(1600);
    assert!((1.6..2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn single_replicate_band_is_degenerate() {
    let mut rng = seed::stream(2, &[0]);
    let samples: Vec<_> = (0..10).map(|i| patient_samples(30.0 + 5.0 * i as f64, 20.0, 100, &mut rng)).collect();
    let times = VarianceBand::grid(132.0, 0.2);
    let band = survival_variance_band(&samples, 0.95, 1, 3, 132.0, &times).unwrap();
    assert!(band.std_dev.iter().all(|s| *s == 0.0));
}

proptest! {
    #[test]
    fn curve_shape(ttps in prop::collection::vec(prop_oneof![Just(132.0), (1u32..132).prop_map(f64::from)], 1..40)) {
        let c = kaplan_meier(&input(&ttps)).unwrap();
        prop_assert_eq!(c.steps[0].survival, 1.0);
        prop_assert!(c.steps.len() - 1 <= ttps.len());
        for w in c.steps.windows(2) {
            prop_assert!(w[1].survival <= w[0].survival && w[1].survival >= 0.0);
            prop_assert!(w[1].t > w[0].t);
        }
        let max = ttps.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(c.final_survival() > 0.0, max == 132.0);
    }

    #[test]
    fn logrank_is_symmetric(a in prop::collection::vec(1u32..=132, 1..15), b in prop::collection::vec(1u32..=132, 1..15)) {
        let fa: Vec<f64> = a.iter().map(|v| *v as f64).collect();
        let fb: Vec<f64> = b.iter().map(|v| *v as f64).collect();
        let x = logrank(&input(&fa), &input(&fb)).unwrap();
        let y = logrank(&input(&fb), &input(&fa)).unwrap();
        prop_assert!((x.statistic - y.statistic).abs() <= 1e-9 * (1.0 + x.statistic));
        prop_assert!(x.p_value >= 0.0 && x.p_value <= 1.0);
    }
}
