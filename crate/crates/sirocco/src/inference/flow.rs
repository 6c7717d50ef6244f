//! Hospital flow-probability updates. Site probabilities live on the logit
//! scale under normal parents shared across sites; observed daily
//! transition counts, where a deployment has them, enter as multinomials.
//!
//! The row constraints (floor exits and ICU exits each sum below one) are
//! enforced by proposal rejection. The parent updates use the unconstrained
//! normal conjugacy, which ignores the truncation those rejections induce;
//! the affected mass is negligible at realistic exit probabilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::stats::{inv_logit, logit, multinomial_ln_pmf, normal_ln_pdf};

use super::context::ModelContext;
use super::params::{FlowParent, ParameterSet, Priors, N_EXITS};

/// Multinomial terms of one site that involve the floor row.
fn floor_terms(ctx: &ModelContext, site: usize, a: f64, b: f64) -> f64 {
    let probs = [1.0 - a - b, a, b];
    ctx.flow_observations
        .iter()
        .filter(|o| o.site == site)
        .flat_map(|o| &o.floor_moves)
        .map(|day| multinomial_ln_pmf(day, &probs))
        .sum()
}

/// Multinomial terms of one site that involve the ICU row.
fn icu_terms(ctx: &ModelContext, site: usize, c: f64, d: f64) -> f64 {
    let probs = [c, 1.0 - c - d, d];
    ctx.flow_observations
        .iter()
        .filter(|o| o.site == site)
        .flat_map(|o| &o.icu_moves)
        .map(|day| multinomial_ln_pmf(day, &probs))
        .sum()
}

/// One random-walk move on one exit probability of one site.
fn update_exit(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    site: usize,
    k: usize,
    scale: f64,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> bool {
    let exits = params.flow.sites[site].exits;
    let current = exits[k];
    let step: f64 = Normal::new(0.0, scale).unwrap().sample(rng);
    let proposed = inv_logit(logit(current) + step);
    let mut next = exits;
    next[k] = proposed;
    // Row support: each pair of exits must leave room for the stay state.
    let (row_ok, data_delta) = if k < 2 {
        (
            next[0] + next[1] < 1.0,
            floor_terms(ctx, site, next[0], next[1]) - floor_terms(ctx, site, exits[0], exits[1]),
        )
    } else {
        (
            next[2] + next[3] < 1.0,
            icu_terms(ctx, site, next[2], next[3]) - icu_terms(ctx, site, exits[2], exits[3]),
        )
    };
    if !row_ok {
        return false;
    }
    let parent = &params.flow.exit_parents[k];
    let mut delta = normal_ln_pdf(logit(proposed), parent.mean, parent.var)
        - normal_ln_pdf(logit(current), parent.mean, parent.var);
    if !prior_only {
        delta += data_delta;
    }
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        params.flow.sites[site].exits = next;
        true
    } else {
        false
    }
}

/// Normal/inverse-gamma conjugate refresh of one parent from its site
/// logits. With no sites the draw is an exact prior sample.
fn update_parent(
    parent: &mut FlowParent,
    logits: &[f64],
    priors: &Priors,
    rng: &mut ChaCha8Rng,
) {
    let n = logits.len() as f64;
    let prior_prec = 1.0 / priors.flow_mean_sd.powi(2);
    let prec = prior_prec + n / parent.var;
    let b: f64 = logits.iter().sum::<f64>() / parent.var;
    let mean_draw: f64 = Normal::new(b / prec, prec.sqrt().recip()).unwrap().sample(rng);
    parent.mean = mean_draw;

    let ss: f64 = logits.iter().map(|l| (l - parent.mean).powi(2)).sum();
    let shape = priors.flow_var.0 + n / 2.0;
    let scale = priors.flow_var.1 + ss / 2.0;
    let g: f64 = rand_distr::Gamma::new(shape, 1.0 / scale)
        .expect("positive gamma parameters")
        .sample(rng);
    parent.var = 1.0 / g;
}

/// One pass over every flow parameter: per-site exit walks, direct-to-ICU
/// Gibbs draws from the parent, then the parent refreshes. The returned
/// tallies aggregate each exit slot across sites.
pub fn flow_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    priors: &Priors,
    scales: &[f64; N_EXITS],
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> [(u64, u64); N_EXITS] {
    let mut tally = [(0u64, 0u64); N_EXITS];
    let n_sites = params.flow.sites.len();
    for site in 0..n_sites {
        for k in 0..N_EXITS {
            tally[k].1 += 1;
            tally[k].0 +=
                update_exit(ctx, params, site, k, scales[k], prior_only, rng) as u64;
        }
        // No calibration data constrains the admission split, so its full
        // conditional is the parent normal on the logit scale.
        let parent = params.flow.direct_icu_parent;
        let draw: f64 = Normal::new(parent.mean, parent.var.sqrt()).unwrap().sample(rng);
        params.flow.sites[site].direct_icu = inv_logit(draw);
    }

    let logits: Vec<f64> = params.flow.sites.iter().map(|s| logit(s.direct_icu)).collect();
    let mut parent = params.flow.direct_icu_parent;
    update_parent(&mut parent, &logits, priors, rng);
    params.flow.direct_icu_parent = parent;
    for k in 0..N_EXITS {
        let logits: Vec<f64> =
            params.flow.sites.iter().map(|s| logit(s.exits[k])).collect();
        let mut parent = params.flow.exit_parents[k];
        update_parent(&mut parent, &logits, priors, rng);
        params.flow.exit_parents[k] = parent;
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hospital::{Capacity, HospitalConfig, TransitionMatrix};
    use crate::inference::context::{ContextOptions, FlowObservation, ModelContext};
    use crate::inference::params::ParameterSet;
    use crate::inference::testutil::two_county_fixture;
    use crate::rng::SeedTree;
    use std::collections::BTreeMap;

    fn fixture_with_hospital() -> (ModelContext, ParameterSet) {
        let (ctx0, _params, _ws) = two_county_fixture();
        let mut catchment = BTreeMap::new();
        catchment.insert(ctx0.graph.region_id(0).to_string(), 0.7);
        catchment.insert(ctx0.graph.region_id(1).to_string(), 0.3);
        let config = HospitalConfig {
            hospital_id: "site-a".into(),
            catchment,
            direct_icu_prob: 0.2,
            transition_probs: TransitionMatrix::from_exit_probs(0.05, 0.12, 0.08, 0.02).unwrap(),
            capacity: Capacity { floor: 40, icu: 8 },
            initial_floor: 4,
            initial_icu: 1,
        };
        let obs = FlowObservation {
            site: 0,
            floor_moves: vec![[18, 3, 5], [20, 2, 6], [15, 4, 4]],
            icu_moves: vec![[2, 7, 1], [1, 8, 2], [3, 6, 1]],
        };
        let ctx = ModelContext::new(
            ctx0.graph.clone(),
            ctx0.data.clone(),
            Vec::new(),
            Vec::new(),
            vec![config],
            vec![obs],
            ContextOptions { vax_lag_days: 2 },
        )
        .unwrap();
        let params = ParameterSet::init(&ctx, &Priors::default()).unwrap();
        (ctx, params)
    }

    #[test]
    fn exit_walks_respect_row_support_and_move() {
        let (ctx, mut params) = fixture_with_hospital();
        let tree = SeedTree::new(8);
        let mut rng = tree.stream("flow-test", 0);
        let scales = [0.4; N_EXITS];
        let mut accepted = 0u64;
        for _ in 0..300 {
            let tally = flow_sweep(&ctx, &mut params, &Priors::default(), &scales, false, &mut rng);
            accepted += tally.iter().map(|t| t.0).sum::<u64>();
            let site = &params.flow.sites[0];
            assert!(site.exits[0] + site.exits[1] < 1.0);
            assert!(site.exits[2] + site.exits[3] < 1.0);
            assert!(site.exits.iter().all(|&e| (0.0..1.0).contains(&e) && e > 0.0));
        }
        assert!(accepted > 100, "flow walks barely move: {accepted}");
    }

    #[test]
    fn exits_concentrate_near_observed_rates_with_tight_parents() {
        let (ctx, mut params) = fixture_with_hospital();
        // Pin the parents so shrinkage is mild and the data dominate.
        params.flow.exit_parents = [FlowParent { mean: -1.5, var: 4.0 }; N_EXITS];
        let tree = SeedTree::new(9);
        let mut rng = tree.stream("flow-test", 1);
        let scales = [0.25; N_EXITS];
        let mut sum_a = 0.0;
        let iters = 6000;
        for it in 0..iters {
            for k in 0..N_EXITS {
                update_exit(&ctx, &mut params, 0, k, scales[k], false, &mut rng);
            }
            if it >= 1000 {
                sum_a += params.flow.sites[0].exits[0];
            }
        }
        let post_mean = sum_a / (iters - 1000) as f64;
        // 9 ICU moves out of 77 floor-days observed; the posterior mean of
        // the floor-to-ICU rate should sit near that empirical fraction.
        let empirical = 9.0 / 77.0;
        assert!(
            (post_mean - empirical).abs() < 0.05,
            "posterior mean {post_mean} far from empirical {empirical}"
        );
    }

    #[test]
    fn parent_updates_track_site_logits() {
        let (_ctx, mut params) = fixture_with_hospital();
        let tree = SeedTree::new(10);
        let mut rng = tree.stream("flow-test", 2);
        let priors = Priors::default();
        // Many sites at a common logit pull the parent mean toward it.
        let logits = vec![-2.0; 40];
        let mut sum = 0.0;
        let draws = 20_000;
        for _ in 0..draws {
            let mut parent = params.flow.exit_parents[0];
            update_parent(&mut parent, &logits, &priors, &mut rng);
            params.flow.exit_parents[0] = parent;
            sum += parent.mean;
        }
        let mean = sum / draws as f64;
        assert!((mean - -2.0).abs() < 0.1, "parent mean {mean}");
    }
}
