//! Convergence diagnostics over tracked scalar traces: split-halves R-hat
//! and autocorrelation-based effective sample size with Geyer's initial
//! monotone truncation. Degenerate traces (constant, or too short) come
//! back as None so reports can flag them instead of printing NaN.

/// Splits each chain in half, discarding the middle element of odd-length
/// chains, so within-chain trends register as between-chain variance.
fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut halves = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len();
        let half = n / 2;
        halves.push(&c[..half]);
        halves.push(&c[n - half..]);
    }
    halves
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Potential scale reduction over split halves. None when any half has
/// fewer than two draws or the pooled within-chain variance vanishes.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let halves = split_halves(chains);
    let m = halves.len() as f64;
    let n = halves.first()?.len();
    if n < 2 || halves.iter().any(|h| h.len() != n) {
        return None;
    }
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 || !w.is_finite() {
        return None;
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Some((var_plus / w).sqrt())
}

/// Lag-`t` autocovariance of one chain about its own mean, with the 1/n
/// normalization.
fn autocov(chain: &[f64], mu: f64, lag: usize) -> f64 {
    let n = chain.len();
    (0..n - lag)
        .map(|i| (chain[i] - mu) * (chain[i + lag] - mu))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size. Combined autocorrelations follow the
/// split-R-hat variance decomposition; the lag sum truncates at the first
/// non-positive pair and is forced monotone non-increasing. None for
/// constant or too-short traces.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains.first()?.len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return None;
    }
    let mf = m as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / mf;
    let grand = mean(&means);
    let b = if m > 1 {
        nf / (mf - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return None;
    }

    let rho = |lag: usize| -> f64 {
        let acov: f64 = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / mf;
        1.0 - (w - acov) / var_plus
    };

    // Paired lag sums, truncated at the first non-positive pair, then made
    // monotone non-increasing.
    let mut pair_sums = Vec::new();
    let max_lag = n - 2;
    let mut lag = 1;
    while lag + 1 <= max_lag {
        let p = rho(lag) + rho(lag + 1);
        if p <= 0.0 {
            break;
        }
        pair_sums.push(p);
        lag += 2;
        if pair_sums.len() > n / 2 {
            break;
        }
    }
    let mut running = f64::INFINITY;
    let mut total = 0.0;
    for p in pair_sums {
        running = running.min(p);
        total += running;
    }
    let tau = 1.0 + 2.0 * total;
    Some((mf * nf / tau).min(mf * nf))
}

/// Diagnostic row for one tracked scalar.
#[derive(Debug, Clone)]
pub struct ScalarDiagnostic {
    pub name: String,
    pub mean: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Summarizes every tracked scalar across chains. `traces[c]` holds chain
/// c's draws, one inner vector per scalar, aligned with `names`.
pub fn summarize_scalars(names: &[String], traces: &[Vec<Vec<f64>>]) -> Vec<ScalarDiagnostic> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let per_chain: Vec<Vec<f64>> = traces.iter().map(|c| c[i].clone()).collect();
            let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
            ScalarDiagnostic {
                name: name.clone(),
                mean: if all.is_empty() { f64::NAN } else { mean(&all) },
                rhat: split_rhat(&per_chain),
                ess: effective_sample_size(&per_chain),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::rng::SeedTree;

    fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let tree = SeedTree::new(seed);
        (0..m)
            .map(|c| {
                let mut rng = tree.stream("diag-iid", c as u64);
                let norm = Normal::new(0.0, 1.0).unwrap();
                (0..n).map(|_| norm.sample(&mut rng)).collect()
            })
            .collect()
    }

    #[test]
    fn iid_draws_have_near_nominal_ess_and_unit_rhat() {
        let chains = iid_chains(4, 2000, 101);
        let total = 8000.0;
        let ess = effective_sample_size(&chains).unwrap();
        assert!(
            (ess - total).abs() < 0.2 * total,
            "iid ESS {ess} far from {total}"
        );
        let rhat = split_rhat(&chains).unwrap();
        assert!((rhat - 1.0).abs() < 0.01, "iid rhat {rhat}");
    }

    #[test]
    fn ar1_chain_ess_matches_integrated_autocorrelation() {
        // AR(1) with coefficient 0.9: integrated autocorrelation time 19.
        let tree = SeedTree::new(102);
        let rho: f64 = 0.9;
        let m = 4;
        let n = 20_000;
        let chains: Vec<Vec<f64>> = (0..m)
            .map(|c| {
                let mut rng = tree.stream("diag-ar1", c as u64);
                let innov = Normal::new(0.0, (1.0 - rho * rho).sqrt()).unwrap();
                let mut x = 0.0;
                (0..n)
                    .map(|_| {
                        x = rho * x + innov.sample(&mut rng);
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = effective_sample_size(&chains).unwrap();
        let expected = (m * n) as f64 / ((1.0 + rho) / (1.0 - rho));
        assert!(
            (ess - expected).abs() < 0.3 * expected,
            "AR(1) ESS {ess}, expected about {expected}"
        );
    }

    #[test]
    fn constant_traces_are_flagged_not_nan() {
        let chains = vec![vec![2.5; 100], vec![2.5; 100]];
        assert!(split_rhat(&chains).is_none());
        assert!(effective_sample_size(&chains).is_none());
    }

    #[test]
    fn diverged_chains_inflate_rhat() {
        let mut chains = iid_chains(2, 1000, 103);
        for x in &mut chains[1] {
            *x += 5.0;
        }
        let rhat = split_rhat(&chains).unwrap();
        assert!(rhat > 1.5, "separated chains rhat {rhat}");
        let ess = effective_sample_size(&chains).unwrap();
        assert!(ess < 100.0, "separated chains should have tiny ESS, got {ess}");
    }

    #[test]
    fn trends_within_a_chain_register_in_split_rhat() {
        // A strong linear trend splits into halves with different means.
        let mut rng = SeedTree::new(104).stream("diag-trend", 0);
        let chain: Vec<f64> = (0..1000)
            .map(|i| i as f64 / 250.0 + rng.gen::<f64>())
            .collect();
        let rhat = split_rhat(&[chain]).unwrap();
        assert!(rhat > 1.2, "trending chain rhat {rhat}");
    }

    #[test]
    fn summaries_align_names_and_values() {
        let names = vec!["a".to_string(), "b".to_string()];
        let traces = vec![
            vec![vec![1.0, 1.1, 0.9, 1.0, 1.05, 0.95], vec![5.0; 6]],
            vec![vec![0.9, 1.0, 1.1, 1.0, 0.95, 1.05], vec![5.0; 6]],
        ];
        let rows = summarize_scalars(&names, &traces);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].name, "a");
        assert!((rows[0].mean - 1.0).abs() < 0.01);
        assert!(rows[1].rhat.is_none() && rows[1].ess.is_none());
        assert!((rows[1].mean - 5.0).abs() < 1e-12);
    }
}
