//! Reference log-posterior evaluation. The update kernels work with local
//! increments; everything here recomputes terms from scratch, so the sweep
//! can audit its running state against an independent evaluation.
//!
//! Conventions, shared with the simulator and the kernels:
//!
//! * Each region's dynamics start at its first day with a reported case.
//!   The seed count is pinned to that day's report, so the seed day carries
//!   neither an infection term nor a detection term.
//! * New infections follow a Poisson censored at the susceptible pool, and
//!   effective vaccinations a binomial censored at the remaining headroom;
//!   boundary states absorb the tail mass.
//! * Correlation parameters carry flat priors on their valid ranges, so
//!   they contribute nothing here.

use crate::stats::{
    beta_ln_pdf, binomial_ln_pmf, binomial_tail_ln, gamma_ln_pdf, inv_gamma_ln_pdf, logit,
    multinomial_ln_pmf, normal_ln_pdf, poisson_ln_pmf,
};

use super::context::ModelContext;
use super::params::{ParameterSet, Priors, SpaceTimeHypers};
use super::structures::Structures;

/// Additive decomposition of the log posterior, for audits and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPostParts {
    pub infection: f64,
    pub transitions: f64,
    pub detection: f64,
    pub tests: f64,
    pub admissions: f64,
    pub flow_data: f64,
    pub field_priors: f64,
    pub noise_priors: f64,
    pub scalar_priors: f64,
    pub flow_priors: f64,
}

impl LogPostParts {
    pub fn total(&self) -> f64 {
        self.infection
            + self.transitions
            + self.detection
            + self.tests
            + self.admissions
            + self.flow_data
            + self.field_priors
            + self.noise_priors
            + self.scalar_priors
            + self.flow_priors
    }
}

/// New-infection terms: Poisson censored at the susceptible pool, one term
/// per active (region, day) after the seed day.
pub fn infection_loglik(ctx: &ModelContext, params: &ParameterSet) -> f64 {
    let traj = &params.traj;
    let tr = &params.transmission;
    let mut lp = 0.0;
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        let pop = ctx.graph.population(r) as f64;
        for t in (t0 + 1)..ctx.n_days() {
            let i_prev = traj.infected.get(r, t - 1);
            let s_prev = traj.susceptible(r, t - 1);
            let rate = i_prev as f64 * s_prev as f64
                * (tr.mu.get(r, t) + tr.epsilon.get(r, t)).exp()
                / pop;
            lp += crate::epi::infection_ln_pmf(traj.y.get(r, t), rate, s_prev);
        }
    }
    lp
}

/// Removal, waning, and vaccination terms. Removals and waning are plain
/// binomials in the previous day's pools; vaccinations are binomial in the
/// lagged report, censored at the day's remaining headroom.
pub fn transition_loglik(ctx: &ModelContext, params: &ParameterSet) -> f64 {
    let traj = &params.traj;
    let mut lp = 0.0;
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        for t in (t0 + 1)..ctx.n_days() {
            let i_prev = traj.infected.get(r, t - 1);
            let r_prev = traj.removed.get(r, t - 1);
            lp += binomial_ln_pmf(traj.c.get(r, t), i_prev, params.removal_prob);
            lp += binomial_ln_pmf(traj.d.get(r, t), r_prev, params.waning_prob);
            let e = traj.e.get(r, t);
            let lagged = ctx.lagged_vax(r, t);
            lp += if traj.susceptible(r, t) == 0 {
                binomial_tail_ln(e, lagged, params.vax_efficacy)
            } else {
                binomial_ln_pmf(e, lagged, params.vax_efficacy)
            };
        }
    }
    lp
}

/// Reported-case terms: binomial thinning of the latent infections at the
/// cell's detection probability, skipping each region's seed day.
pub fn detection_loglik(ctx: &ModelContext, params: &ParameterSet) -> f64 {
    let det = &params.detection;
    let mut lp = 0.0;
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        let pop = ctx.graph.population(r) as i64;
        for t in (t0 + 1)..ctx.n_days() {
            let rate = crate::observation::log_test_rate(params.tests.counts.get(r, t), pop);
            let pi = crate::observation::detection_prob(
                det.intercept,
                det.slope,
                rate,
                det.noise.get(r, t),
            );
            lp += binomial_ln_pmf(
                ctx.data.reported_cases.get(r, t),
                params.traj.y.get(r, t),
                pi,
            );
        }
    }
    lp
}

/// Negative-test terms: Poisson in the exponentiated test-volume field,
/// every cell.
pub fn tests_loglik(params: &ParameterSet) -> f64 {
    params
        .tests
        .counts
        .flat()
        .iter()
        .zip(params.tests.field.flat())
        .map(|(&m, &f)| poisson_ln_pmf(m, f.exp()))
        .sum()
}

/// Admission terms: Poisson in the infected count times the exponentiated
/// admission field, censored at the infected count. Zero when the
/// admission model is off.
pub fn admission_loglik(ctx: &ModelContext, params: &ParameterSet) -> f64 {
    let Some(adm) = &params.admissions else { return 0.0 };
    let mut lp = 0.0;
    for r in 0..ctx.n_regions() {
        for t in 0..ctx.n_days() {
            let infected = params.traj.infected.get(r, t);
            let rate = infected as f64 * adm.omega.get(r, t).exp();
            lp += crate::hospital::admission_ln_pmf(adm.counts.get(r, t), rate, infected);
        }
    }
    lp
}

/// Within-hospital transition counts, when observed: per day, the floor
/// pool splits (stay, to ICU, discharge) and the ICU pool (to floor, stay,
/// discharge).
pub fn flow_loglik(ctx: &ModelContext, params: &ParameterSet) -> f64 {
    let mut lp = 0.0;
    for obs in &ctx.flow_observations {
        let site = &params.flow.sites[obs.site];
        let [a, b, c, d] = site.exits;
        for day in &obs.floor_moves {
            lp += multinomial_ln_pmf(day, &[1.0 - a - b, a, b]);
        }
        for day in &obs.icu_moves {
            lp += multinomial_ln_pmf(day, &[c, 1.0 - c - d, d]);
        }
    }
    lp
}

/// GMRF priors of every field: the three space-time surfaces and the
/// regional intercept/slope fields.
pub fn field_priors(
    ctx: &ModelContext,
    structures: &Structures,
    params: &ParameterSet,
) -> f64 {
    let tr = &params.transmission;
    let n = ctx.n_regions();
    let t = ctx.n_days();

    // Mean surface of the transmission field.
    let mut mu_mean = vec![0.0; n * t];
    for r in 0..n {
        for d in 0..t {
            let mut m = tr.phi.values[r];
            for (k, cov) in ctx.random_covariates.iter().enumerate() {
                m += cov.values.get(r, d) * tr.alphas[k].values[r];
            }
            for (j, cov) in ctx.fixed_covariates.iter().enumerate() {
                m += cov.values.get(r, d) * tr.betas[j];
            }
            mu_mean[r * t + d] = m;
        }
    }

    let mut lp = structures.mu.log_density(tr.mu.flat(), &mu_mean, tr.hypers.tau);
    lp += structures
        .phi
        .log_density(&tr.phi.values, tr.phi.hypers.parent_mean, tr.phi.hypers.tau);
    for (k, alpha) in tr.alphas.iter().enumerate() {
        lp += structures.alphas[k].log_density(
            &alpha.values,
            alpha.hypers.parent_mean,
            alpha.hypers.tau,
        );
    }

    let tests_mean = vec![params.tests.mean; n * t];
    lp += structures
        .tests
        .log_density(params.tests.field.flat(), &tests_mean, params.tests.hypers.tau);

    if let (Some(adm), Some(st)) = (&params.admissions, &structures.adm) {
        let mut omega_mean = vec![0.0; n * t];
        for r in 0..n {
            for d in 0..t {
                omega_mean[r * t + d] = adm.phi.values[r];
            }
        }
        lp += st.field.log_density(adm.omega.flat(), &omega_mean, adm.hypers.tau);
        lp += st
            .phi
            .log_density(&adm.phi.values, adm.phi.hypers.parent_mean, adm.phi.hypers.tau);
    }
    lp
}

/// iid noise priors of the transmission and detection day effects.
pub fn noise_priors(params: &ParameterSet) -> f64 {
    let mut lp = 0.0;
    for &e in params.transmission.epsilon.flat() {
        lp += normal_ln_pdf(e, 0.0, params.transmission.sigma2);
    }
    for &e in params.detection.noise.flat() {
        lp += normal_ln_pdf(e, 0.0, params.detection.sigma2);
    }
    lp
}

fn space_time_tau_prior(h: &SpaceTimeHypers, priors: &Priors) -> f64 {
    gamma_ln_pdf(h.tau, priors.tau.0, priors.tau.1)
}

/// Priors of every scalar: transition probabilities, noise variances,
/// detection coefficients, fixed effects, precisions, and parent means.
pub fn scalar_priors(params: &ParameterSet, priors: &Priors) -> f64 {
    let tr = &params.transmission;
    let mut lp = beta_ln_pdf(params.removal_prob, priors.theta.0, priors.theta.1)
        + beta_ln_pdf(params.waning_prob, priors.vartheta.0, priors.vartheta.1)
        + beta_ln_pdf(params.vax_efficacy, priors.vax_efficacy.0, priors.vax_efficacy.1)
        + inv_gamma_ln_pdf(tr.sigma2, priors.sigma2.0, priors.sigma2.1)
        + inv_gamma_ln_pdf(params.detection.sigma2, priors.sigma_tilde2.0, priors.sigma_tilde2.1)
        + normal_ln_pdf(params.detection.intercept, 0.0, priors.beta_tilde_sd.powi(2))
        + normal_ln_pdf(params.detection.slope, 0.0, priors.beta_tilde_sd.powi(2));
    lp += space_time_tau_prior(&tr.hypers, priors);
    lp += gamma_ln_pdf(tr.phi.hypers.tau, priors.tau.0, priors.tau.1);
    lp += normal_ln_pdf(tr.phi.hypers.parent_mean, 0.0, priors.parent_mean_sd.powi(2));
    for alpha in &tr.alphas {
        lp += gamma_ln_pdf(alpha.hypers.tau, priors.tau.0, priors.tau.1);
        lp += normal_ln_pdf(alpha.hypers.parent_mean, 0.0, priors.parent_mean_sd.powi(2));
    }
    for &b in &tr.betas {
        lp += normal_ln_pdf(b, 0.0, priors.beta_sd.powi(2));
    }
    lp += space_time_tau_prior(&params.tests.hypers, priors);
    lp += normal_ln_pdf(params.tests.mean, 0.0, priors.parent_mean_sd.powi(2));
    if let Some(adm) = &params.admissions {
        lp += space_time_tau_prior(&adm.hypers, priors);
        lp += gamma_ln_pdf(adm.phi.hypers.tau, priors.tau.0, priors.tau.1);
        lp += normal_ln_pdf(adm.phi.hypers.parent_mean, 0.0, priors.parent_mean_sd.powi(2));
    }
    lp
}

/// Hierarchical priors of the hospital flow probabilities: site logits
/// against their logit-normal parents, and the parents' own priors.
pub fn flow_priors(params: &ParameterSet, priors: &Priors) -> f64 {
    let flow = &params.flow;
    let mut lp = 0.0;
    for site in &flow.sites {
        lp += normal_ln_pdf(
            logit(site.direct_icu),
            flow.direct_icu_parent.mean,
            flow.direct_icu_parent.var,
        );
        for (k, &e) in site.exits.iter().enumerate() {
            lp += normal_ln_pdf(logit(e), flow.exit_parents[k].mean, flow.exit_parents[k].var);
        }
    }
    lp += normal_ln_pdf(flow.direct_icu_parent.mean, 0.0, priors.flow_mean_sd.powi(2));
    lp += inv_gamma_ln_pdf(flow.direct_icu_parent.var, priors.flow_var.0, priors.flow_var.1);
    for p in &flow.exit_parents {
        lp += normal_ln_pdf(p.mean, 0.0, priors.flow_mean_sd.powi(2));
        lp += inv_gamma_ln_pdf(p.var, priors.flow_var.0, priors.flow_var.1);
    }
    lp
}

pub fn log_posterior_parts(
    ctx: &ModelContext,
    structures: &Structures,
    priors: &Priors,
    params: &ParameterSet,
    prior_only: bool,
) -> LogPostParts {
    let data = |f: &dyn Fn() -> f64| if prior_only { 0.0 } else { f() };
    LogPostParts {
        infection: data(&|| infection_loglik(ctx, params)),
        transitions: data(&|| transition_loglik(ctx, params)),
        detection: data(&|| detection_loglik(ctx, params)),
        tests: data(&|| tests_loglik(params)),
        admissions: data(&|| admission_loglik(ctx, params)),
        flow_data: data(&|| flow_loglik(ctx, params)),
        field_priors: field_priors(ctx, structures, params),
        noise_priors: noise_priors(params),
        scalar_priors: scalar_priors(params, priors),
        flow_priors: flow_priors(params, priors),
    }
}

pub fn log_posterior(
    ctx: &ModelContext,
    structures: &Structures,
    priors: &Priors,
    params: &ParameterSet,
    prior_only: bool,
) -> f64 {
    log_posterior_parts(ctx, structures, priors, params, prior_only).total()
}
