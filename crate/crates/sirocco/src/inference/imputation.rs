//! County-level imputation of state-reported totals. Negative tests and
//! admissions arrive as state sums; the sampler reallocates each (state,
//! day) total across the member counties with a multinomial proposal whose
//! weights match the Poisson intensities, so the Poisson factors cancel in
//! the acceptance ratio. What remains is the detection ratio for tests and
//! the censoring correction for admissions.
//!
//! Every pass re-audits that the county counts still sum to the reported
//! totals; a violation is a sampler bug, so it aborts rather than warns.

use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::observation::{detection_prob, impute_allocation, log_test_rate};
use crate::stats::{binomial_ln_pmf, poisson_ln_pmf};

use super::context::ModelContext;
use super::params::ParameterSet;
use super::structures::Workspace;

/// One multinomial reallocation of a state's negative tests for one day.
fn impute_tests_day(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    regions: &[usize],
    total: i64,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> bool {
    let weights: Vec<f64> = regions
        .iter()
        .map(|&r| params.tests.field.get(r, t).exp())
        .collect();
    let Ok(proposal) = impute_allocation(total, &weights, rng) else {
        return false;
    };
    let det = &params.detection;
    let mut delta = 0.0;
    for (idx, &r) in regions.iter().enumerate() {
        if proposal[idx] == params.tests.counts.get(r, t) {
            continue;
        }
        let Some(t0) = ctx.start_days[r] else { continue };
        if t <= t0 {
            continue;
        }
        let y = params.traj.y.get(r, t);
        if y == 0 {
            continue;
        }
        let noise = det.noise.get(r, t);
        let reported = ctx.data.reported_cases.get(r, t);
        let pi_new = detection_prob(
            det.intercept,
            det.slope,
            log_test_rate(proposal[idx], ctx.graph.population(r) as i64),
            noise,
        );
        let pi_old = detection_prob(det.intercept, det.slope, ws.lograte.get(r, t), noise);
        delta += binomial_ln_pmf(reported, y, pi_new) - binomial_ln_pmf(reported, y, pi_old);
    }
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        for (idx, &r) in regions.iter().enumerate() {
            if params.tests.counts.get(r, t) != proposal[idx] {
                params.tests.counts.set(r, t, proposal[idx]);
                ws.refresh_tests_cell(ctx, params, r, t);
            }
        }
        true
    } else {
        false
    }
}

/// One multinomial reallocation of a state's admissions for one day. The
/// proposal weights are the Poisson intensities, so only the truncation at
/// each county's infected pool survives in the ratio.
fn impute_admissions_day(
    params: &mut ParameterSet,
    regions: &[usize],
    total: i64,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> bool {
    let adm = params.admissions.as_ref().unwrap();
    let weights: Vec<f64> = regions
        .iter()
        .map(|&r| {
            params.traj.infected.get(r, t) as f64 * adm.omega.get(r, t).exp()
        })
        .collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        // No intensity anywhere; only total == 0 is consistent, and then
        // there is nothing to reallocate.
        return false;
    }
    let Ok(proposal) = impute_allocation(total, &weights, rng) else {
        return false;
    };
    let mut delta = 0.0;
    for (idx, &r) in regions.iter().enumerate() {
        let infected = params.traj.infected.get(r, t);
        let h_new = proposal[idx];
        let h_old = adm.counts.get(r, t);
        if h_new == h_old {
            continue;
        }
        if h_new > infected {
            return false;
        }
        let rate = infected as f64 * adm.omega.get(r, t).exp();
        delta += crate::hospital::admission_ln_pmf(h_new, rate, infected)
            - poisson_ln_pmf(h_new, rate)
            - (crate::hospital::admission_ln_pmf(h_old, rate, infected)
                - poisson_ln_pmf(h_old, rate));
    }
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        let adm = params.admissions.as_mut().unwrap();
        for (idx, &r) in regions.iter().enumerate() {
            adm.counts.set(r, t, proposal[idx]);
        }
        true
    } else {
        false
    }
}

/// Verifies that the imputed county counts reproduce the reported state
/// totals exactly, every state and day. Panics on violation: a failed sum
/// means a corrupted sampler state, not a recoverable condition.
pub fn audit_imputation_sums(ctx: &ModelContext, params: &ParameterSet) {
    for (state, regions) in &ctx.state_regions {
        let series = &ctx.negative_tests[state];
        for t in 0..ctx.n_days() {
            let sum: i64 = regions.iter().map(|&r| params.tests.counts.get(r, t)).sum();
            assert_eq!(
                sum, series[t],
                "test imputation for state '{state}' day {t} sums to {sum}, expected {}",
                series[t]
            );
        }
    }
    if let (Some(adm), Some(state_adm)) = (&params.admissions, &ctx.data.state_admissions) {
        for (state, series) in state_adm {
            let regions = &ctx.state_regions[state];
            for t in 0..ctx.n_days() {
                let sum: i64 = regions.iter().map(|&r| adm.counts.get(r, t)).sum();
                assert_eq!(
                    sum, series[t],
                    "admission imputation for state '{state}' day {t} sums to {sum}, expected {}",
                    series[t]
                );
            }
        }
    }
}

/// One pass over every (state, day): tests first, then admissions.
/// Returns ((tests accepted, attempted), (admissions accepted, attempted)).
/// Skipped entirely when the likelihood is disabled; the audit still runs.
pub fn imputation_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> [(u64, u64); 2] {
    let mut tally = [(0u64, 0u64); 2];
    if !prior_only {
        for (state, regions) in &ctx.state_regions {
            if regions.len() < 2 {
                continue;
            }
            let series = &ctx.negative_tests[state];
            for t in 0..ctx.n_days() {
                tally[0].1 += 1;
                tally[0].0 +=
                    impute_tests_day(ctx, params, ws, regions, series[t], t, rng) as u64;
            }
        }
        if let Some(state_adm) = &ctx.data.state_admissions {
            if params.admissions.is_some() {
                for (state, series) in state_adm {
                    let regions = &ctx.state_regions[state];
                    for t in 0..ctx.n_days() {
                        if regions.len() < 2 || series[t] == 0 {
                            continue;
                        }
                        tally[1].1 += 1;
                        tally[1].0 +=
                            impute_admissions_day(params, regions, series[t], t, rng) as u64;
                    }
                }
            }
        }
    }
    audit_imputation_sums(ctx, params);
    tally
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::testutil::two_county_fixture;
    use crate::rng::SeedTree;

    #[test]
    fn sweeps_mix_and_keep_sums_exact() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let tree = SeedTree::new(61);
        let mut rng = tree.stream("imputation-test", 0);
        let before_tests = params.tests.counts.clone();
        let mut tests_moved = false;
        let mut adm_moved = false;
        for _ in 0..200 {
            let tally = imputation_sweep(&ctx, &mut params, &mut ws, false, &mut rng);
            assert!(tally[0].1 > 0 && tally[1].1 > 0);
            tests_moved |= params.tests.counts.flat() != before_tests.flat();
            adm_moved |= tally[1].0 > 0;
        }
        assert!(tests_moved, "test reallocation never moved");
        assert!(adm_moved, "admission reallocation never accepted");
        // The workspace caches must track the reallocated counts.
        let fresh = Workspace::new(&ctx, &params);
        for (a, b) in ws.lograte.flat().iter().zip(fresh.lograte.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ws.pi.flat().iter().zip(fresh.pi.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn admission_proposals_never_exceed_the_infected_pool() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let tree = SeedTree::new(62);
        let mut rng = tree.stream("imputation-test", 1);
        for _ in 0..300 {
            imputation_sweep(&ctx, &mut params, &mut ws, false, &mut rng);
            let adm = params.admissions.as_ref().unwrap();
            for r in 0..ctx.n_regions() {
                for t in 0..ctx.n_days() {
                    assert!(adm.counts.get(r, t) <= params.traj.infected.get(r, t));
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "test imputation")]
    fn audit_catches_a_corrupted_allocation() {
        let (ctx, mut params, _ws) = two_county_fixture();
        let v = params.tests.counts.get(0, 3);
        params.tests.counts.set(0, 3, v + 1);
        audit_imputation_sums(&ctx, &params);
    }

    #[test]
    fn prior_only_skips_proposals_but_still_audits() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let tree = SeedTree::new(63);
        let mut rng = tree.stream("imputation-test", 2);
        let before = params.tests.counts.clone();
        let tally = imputation_sweep(&ctx, &mut params, &mut ws, true, &mut rng);
        assert_eq!(tally, [(0, 0); 2]);
        assert_eq!(before.flat(), params.tests.counts.flat());
    }
}
