//! Scalar parameter updates: beta-conjugate draws for the removal, waning,
//! and vaccination probabilities, and random-walk Metropolis on the two
//! detection coefficients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::stats::{binomial_ln_pmf, binomial_tail_ln, normal_ln_pdf};

use super::context::ModelContext;
use super::params::{ParameterSet, Priors};
use super::structures::Workspace;

fn beta_draw(a: f64, b: f64, rng: &mut ChaCha8Rng) -> f64 {
    Beta::new(a, b).expect("positive beta parameters").sample(rng)
}

/// Successes and failures of the removal binomials over active days.
fn removal_counts(ctx: &ModelContext, params: &ParameterSet) -> (i64, i64) {
    let traj = &params.traj;
    let (mut s, mut f) = (0i64, 0i64);
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        for t in (t0 + 1)..ctx.n_days() {
            let c = traj.c.get(r, t);
            s += c;
            f += traj.infected.get(r, t - 1) - c;
        }
    }
    (s, f)
}

fn waning_counts(ctx: &ModelContext, params: &ParameterSet) -> (i64, i64) {
    let traj = &params.traj;
    let (mut s, mut f) = (0i64, 0i64);
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        for t in (t0 + 1)..ctx.n_days() {
            let d = traj.d.get(r, t);
            s += d;
            f += traj.removed.get(r, t - 1) - d;
        }
    }
    (s, f)
}

/// Conjugate draws for the removal and waning probabilities. With the
/// likelihood disabled the counts are zero and the draws are exact prior
/// samples.
pub fn update_transition_probs(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    priors: &Priors,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) {
    let (cs, cf) = if prior_only { (0, 0) } else { removal_counts(ctx, params) };
    params.removal_prob = beta_draw(
        priors.theta.0 + cs as f64,
        priors.theta.1 + cf as f64,
        rng,
    );
    let (ds, df) = if prior_only { (0, 0) } else { waning_counts(ctx, params) };
    params.waning_prob = beta_draw(
        priors.vartheta.0 + ds as f64,
        priors.vartheta.1 + df as f64,
        rng,
    );
}

/// Vaccination-probability draw. Uncensored cells are beta-conjugate;
/// cells censored at the susceptible headroom contribute an upper-tail
/// mass instead, so the conjugate draw doubles as an independence proposal
/// accepted on the censored-tail ratio. With no censored cells the move is
/// exact and always accepted.
pub fn update_vax_prob(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    priors: &Priors,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> bool {
    let mut successes = 0i64;
    let mut failures = 0i64;
    let mut censored: Vec<(i64, i64)> = Vec::new();
    if !prior_only {
        let traj = &params.traj;
        for r in 0..ctx.n_regions() {
            let Some(t0) = ctx.start_days[r] else { continue };
            for t in (t0 + 1)..ctx.n_days() {
                let lagged = ctx.lagged_vax(r, t);
                if lagged == 0 {
                    continue;
                }
                let e = traj.e.get(r, t);
                if traj.susceptible(r, t) == 0 {
                    censored.push((e, lagged));
                } else {
                    successes += e;
                    failures += lagged - e;
                }
            }
        }
    }
    let proposed = beta_draw(
        priors.vax_efficacy.0 + successes as f64,
        priors.vax_efficacy.1 + failures as f64,
        rng,
    );
    let mut delta = 0.0;
    for &(e, lagged) in &censored {
        delta += binomial_tail_ln(e, lagged, proposed)
            - binomial_tail_ln(e, lagged, params.vax_efficacy);
    }
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        params.vax_efficacy = proposed;
        true
    } else {
        false
    }
}

/// Detection terms as a function of candidate coefficients, using the
/// cached log test rates. Cells with no latent infections contribute a
/// constant and are skipped.
fn detection_scan(ctx: &ModelContext, params: &ParameterSet, ws: &Workspace, b1: f64, b2: f64) -> f64 {
    let mut lp = 0.0;
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        for t in (t0 + 1)..ctx.n_days() {
            let y = params.traj.y.get(r, t);
            if y == 0 {
                continue;
            }
            let logit_pi = b1 + b2 * ws.lograte.get(r, t) + params.detection.noise.get(r, t);
            let pi = crate::stats::inv_logit(logit_pi);
            lp += binomial_ln_pmf(ctx.data.reported_cases.get(r, t), y, pi);
        }
    }
    lp
}

/// Random-walk moves on the detection intercept and slope, one at a time.
/// Returns (accepted, attempted) per coefficient.
pub fn update_detection_coeffs(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    priors: &Priors,
    scales: (f64, f64),
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> [(u64, u64); 2] {
    let prior_var = priors.beta_tilde_sd.powi(2);
    let mut tally = [(0u64, 1u64); 2];
    let mut current = if prior_only {
        0.0
    } else {
        detection_scan(ctx, params, ws, params.detection.intercept, params.detection.slope)
    };
    for (idx, scale) in [scales.0, scales.1].into_iter().enumerate() {
        let (b1, b2) = (params.detection.intercept, params.detection.slope);
        let step: f64 = Normal::new(0.0, scale).unwrap().sample(rng);
        let (n1, n2) = if idx == 0 { (b1 + step, b2) } else { (b1, b2 + step) };
        let proposed_ll = if prior_only {
            0.0
        } else {
            detection_scan(ctx, params, ws, n1, n2)
        };
        let old = if idx == 0 { b1 } else { b2 };
        let new = if idx == 0 { n1 } else { n2 };
        let delta = proposed_ll - current
            + normal_ln_pdf(new, 0.0, prior_var)
            - normal_ln_pdf(old, 0.0, prior_var);
        if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
            params.detection.intercept = n1;
            params.detection.slope = n2;
            current = proposed_ll;
            tally[idx].0 = 1;
        }
    }
    ws.refresh_pi(ctx, params);
    tally
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::testutil::two_county_fixture;
    use crate::rng::SeedTree;

    #[test]
    fn removal_counts_match_a_direct_walk() {
        let (ctx, params, _ws) = two_county_fixture();
        let (s, f) = removal_counts(&ctx, &params);
        let mut s2 = 0;
        let mut f2 = 0;
        for r in 0..ctx.n_regions() {
            let t0 = ctx.start_days[r].unwrap();
            for t in (t0 + 1)..ctx.n_days() {
                s2 += params.traj.c.get(r, t);
                f2 += params.traj.infected.get(r, t - 1) - params.traj.c.get(r, t);
            }
        }
        assert_eq!((s, f), (s2, f2));
        assert!(s >= 0 && f >= 0);
    }

    #[test]
    fn conjugate_removal_draw_matches_analytic_posterior_moments() {
        // 100 removals out of 1400 at-risk days against a Beta(10, 130)
        // prior gives a Beta(110, 1430) posterior.
        let (a, b) = (10.0 + 100.0, 130.0 + 1300.0);
        let tree = SeedTree::new(47);
        let mut rng = tree.stream("scalars-test", 0);
        let draws = 50_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            let v = beta_draw(a, b, &mut rng);
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let exact_mean = a / (a + b);
        let exact_var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        assert!((mean - exact_mean).abs() < 4.0 * (exact_var / draws as f64).sqrt());
        assert!((var - exact_var).abs() < 0.05 * exact_var);
    }

    #[test]
    fn prior_only_transition_draws_ignore_the_trajectory() {
        let (ctx, mut params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let tree = SeedTree::new(48);
        let mut rng = tree.stream("scalars-test", 1);
        let draws = 40_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            update_transition_probs(&ctx, &mut params, &priors, true, &mut rng);
            sum += params.removal_prob;
        }
        let mean = sum / draws as f64;
        let exact = priors.theta.0 / (priors.theta.0 + priors.theta.1);
        assert!((mean - exact).abs() < 0.003, "{mean} vs {exact}");
    }

    #[test]
    fn vax_update_accepts_unconditionally_without_censored_cells() {
        let (ctx, mut params, _ws) = two_county_fixture();
        // The fixture never exhausts a susceptible pool.
        for r in 0..ctx.n_regions() {
            for t in 0..ctx.n_days() {
                assert!(params.traj.susceptible(r, t) > 0);
            }
        }
        let priors = Priors::default();
        let tree = SeedTree::new(49);
        let mut rng = tree.stream("scalars-test", 2);
        for _ in 0..50 {
            assert!(update_vax_prob(&ctx, &mut params, &priors, false, &mut rng));
        }
    }

    #[test]
    fn detection_walk_moves_and_keeps_pi_cache_synced() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let tree = SeedTree::new(50);
        let mut rng = tree.stream("scalars-test", 3);
        let priors = Priors::default();
        let mut accepted = 0;
        for _ in 0..200 {
            let tally = update_detection_coeffs(
                &ctx, &mut params, &mut ws, &priors, (0.3, 0.3), false, &mut rng,
            );
            accepted += tally[0].0 + tally[1].0;
        }
        assert!(accepted > 0);
        let fresh = Workspace::new(&ctx, &params);
        for (a, b) in ws.pi.flat().iter().zip(fresh.pi.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
