//! Updates of the iid day effects: the transmission perturbation that
//! multiplies the infection rate and the detection perturbation on the
//! logit scale. Cells whose likelihood term is constant (inactive regions,
//! seed days, empty pools) are drawn straight from the prior; the rest take
//! a random-walk Metropolis step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::epi::infection_ln_pmf;
use crate::stats::binomial_ln_pmf;

use super::context::ModelContext;
use super::params::ParameterSet;
use super::structures::Workspace;

/// Whether the infection term at (r, t) actually varies with the
/// transmission intensity there.
fn epsilon_has_data(ctx: &ModelContext, params: &ParameterSet, r: usize, t: usize) -> bool {
    match ctx.start_days[r] {
        Some(t0) if t > t0 => {
            params.traj.infected.get(r, t - 1) > 0 && params.traj.susceptible(r, t - 1) > 0
        }
        _ => false,
    }
}

/// Whether the detection term at (r, t) varies with the noise there.
fn noise_has_data(ctx: &ModelContext, params: &ParameterSet, r: usize, t: usize) -> bool {
    match ctx.start_days[r] {
        Some(t0) if t > t0 => params.traj.y.get(r, t) > 0,
        _ => false,
    }
}

/// One pass over both noise surfaces. Returns ((accepts, attempts)) for the
/// transmission cells and the detection cells; prior draws are not tallied.
pub fn noise_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    eps_scale: f64,
    det_scale: f64,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> [(u64, u64); 2] {
    let mut tally = [(0u64, 0u64); 2];
    let n_regions = ctx.n_regions();
    let n_days = ctx.n_days();

    let eps_prior = Normal::new(0.0, params.transmission.sigma2.sqrt()).unwrap();
    let eps_step = Normal::new(0.0, eps_scale).unwrap();
    for r in 0..n_regions {
        for t in 0..n_days {
            if prior_only || !epsilon_has_data(ctx, params, r, t) {
                params.transmission.epsilon.set(r, t, eps_prior.sample(rng));
                ws.refresh_inf_cell(ctx, params, r, t);
                continue;
            }
            tally[0].1 += 1;
            let old = params.transmission.epsilon.get(r, t);
            let new = old + eps_step.sample(rng);
            let i_prev = params.traj.infected.get(r, t - 1) as f64;
            let s_prev = params.traj.susceptible(r, t - 1);
            let rate_old = i_prev * s_prev as f64 * ws.inf_factor.get(r, t);
            let rate_new = rate_old * (new - old).exp();
            let y = params.traj.y.get(r, t);
            let sigma2 = params.transmission.sigma2;
            let delta = infection_ln_pmf(y, rate_new, s_prev)
                - infection_ln_pmf(y, rate_old, s_prev)
                + (old * old - new * new) / (2.0 * sigma2);
            if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
                params.transmission.epsilon.set(r, t, new);
                ws.refresh_inf_cell(ctx, params, r, t);
                tally[0].0 += 1;
            }
        }
    }

    let det_prior = Normal::new(0.0, params.detection.sigma2.sqrt()).unwrap();
    let det_step = Normal::new(0.0, det_scale).unwrap();
    for r in 0..n_regions {
        for t in 0..n_days {
            if prior_only || !noise_has_data(ctx, params, r, t) {
                params.detection.noise.set(r, t, det_prior.sample(rng));
                ws.refresh_pi_cell(params, r, t);
                continue;
            }
            tally[1].1 += 1;
            let old = params.detection.noise.get(r, t);
            let new = old + det_step.sample(rng);
            let y = params.traj.y.get(r, t);
            let reported = ctx.data.reported_cases.get(r, t);
            let base = params.detection.intercept
                + params.detection.slope * ws.lograte.get(r, t);
            let pi_old = crate::stats::inv_logit(base + old);
            let pi_new = crate::stats::inv_logit(base + new);
            let sigma2 = params.detection.sigma2;
            let delta = binomial_ln_pmf(reported, y, pi_new)
                - binomial_ln_pmf(reported, y, pi_old)
                + (old * old - new * new) / (2.0 * sigma2);
            if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
                params.detection.noise.set(r, t, new);
                ws.refresh_pi_cell(params, r, t);
                tally[1].0 += 1;
            }
        }
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::testutil::two_county_fixture;
    use crate::rng::SeedTree;

    #[test]
    fn prior_only_noise_matches_prior_moments() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        params.transmission.sigma2 = 0.09;
        params.detection.sigma2 = 0.25;
        let tree = SeedTree::new(5);
        let mut rng = tree.stream("noise-test", 0);
        let mut eps_sq = 0.0;
        let mut det_sq = 0.0;
        let mut n = 0usize;
        for _ in 0..400 {
            noise_sweep(&ctx, &mut params, &mut ws, 0.3, 0.3, true, &mut rng);
            eps_sq += params
                .transmission
                .epsilon
                .flat()
                .iter()
                .map(|e| e * e)
                .sum::<f64>();
            det_sq += params.detection.noise.flat().iter().map(|e| e * e).sum::<f64>();
            n += params.transmission.epsilon.flat().len();
        }
        // Cell draws are iid from the prior, so the mean square estimates
        // sigma^2 with Monte Carlo error ~ sigma^2 sqrt(2/n), n = 6400.
        assert!((eps_sq / n as f64 - 0.09).abs() < 0.09 * 0.1);
        assert!((det_sq / n as f64 - 0.25).abs() < 0.25 * 0.1);
    }

    #[test]
    fn data_cells_mix_and_keep_caches_in_sync() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let tree = SeedTree::new(6);
        let mut rng = tree.stream("noise-test", 1);
        let mut accepted = 0;
        let mut attempted = 0;
        for _ in 0..50 {
            let tally =
                noise_sweep(&ctx, &mut params, &mut ws, 0.4, 0.4, false, &mut rng);
            accepted += tally[0].0 + tally[1].0;
            attempted += tally[0].1 + tally[1].1;
        }
        assert!(attempted > 0);
        assert!(accepted > 0, "no noise proposal accepted in 50 sweeps");
        // Cache agreement after many accepts.
        let fresh = Workspace::new(&ctx, &params);
        for (a, b) in fresh.inf_factor.flat().iter().zip(ws.inf_factor.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fresh.pi.flat().iter().zip(ws.pi.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
