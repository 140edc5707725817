//! Convergence diagnostics over multiple chains of one scalar.

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Within-chain mean variance `W` and the pooled estimate `var+`.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let w = chains.iter().map(|c| sample_variance(c)).sum::<f64>() / chains.len() as f64;
    let b_over_n = if chains.len() > 1 {
        let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
        sample_variance(&means)
    } else {
        0.0
    };
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Split R-hat: every chain is cut in half and the halves are compared as
/// separate chains. Returns 1 for constant draws and `inf` when chains are
/// internally constant but disagree.
pub fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = &c[c.len() - 2 * half..];
            [&c[..half], &c[half..]]
        })
        .collect();
    let (w, var_plus) = variance_components(&halves);
    if w == 0.0 {
        return if var_plus == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Biased autocovariance at `lag`.
fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence truncation of the combined autocorrelation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let slices: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let total = (slices.len() * n) as f64;
    let (w, var_plus) = variance_components(&slices);
    if var_plus == 0.0 {
        return total;
    }
    let means: Vec<f64> = slices.iter().map(|c| mean(c)).collect();
    let rho = |lag: usize| {
        let acov = slices
            .iter()
            .zip(&means)
            .map(|(c, &m)| autocovariance(c, m, lag))
            .sum::<f64>()
            / slices.len() as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10().max(1.0));
    total / tau
}
