//! The full parameter state of one chain, its priors, initialization, and a
//! flat serialization used by the draw files.

use crate::epi::CompartmentTrajectory;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::observation::impute_allocation;
use crate::stats::logit;

use super::context::ModelContext;

/// Hyperparameters of one space-time field: precision scale and the spatial
/// and temporal correlation parameters of its separable structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeHypers {
    pub tau: f64,
    /// Spatial smoothing in [0, 1).
    pub rho_s: f64,
    /// Temporal autocorrelation in (-1, 1).
    pub rho_t: f64,
}

/// Hyperparameters of one regional CAR field with a scalar parent mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionHypers {
    pub tau: f64,
    pub rho: f64,
    pub parent_mean: f64,
}

/// One regional coefficient field (an intercept per region, or a per-region
/// slope on a covariate) with its CAR hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEffect {
    pub values: Vec<f64>,
    pub hypers: RegionHypers,
}

impl RegionEffect {
    pub fn constant(n: usize, value: f64) -> Self {
        RegionEffect {
            values: vec![value; n],
            hypers: RegionHypers { tau: 1.0, rho: 0.5, parent_mean: value },
        }
    }
}

/// Log-transmission-intensity model: `log B = mu + epsilon`, where `mu` is a
/// space-time field whose mean stacks a regional intercept, per-region
/// covariate slopes, and scalar fixed effects, and `epsilon` is iid daily
/// noise.
#[derive(Debug, Clone)]
pub struct TransmissionParams {
    pub mu: Grid<f64>,
    pub hypers: SpaceTimeHypers,
    pub phi: RegionEffect,
    pub alphas: Vec<RegionEffect>,
    pub betas: Vec<f64>,
    pub epsilon: Grid<f64>,
    pub sigma2: f64,
}

/// Case-detection model: logit of the detection probability is an intercept
/// plus a slope on log tests per hundred thousand, plus iid noise.
#[derive(Debug, Clone)]
pub struct DetectionModelParams {
    pub intercept: f64,
    pub slope: f64,
    pub noise: Grid<f64>,
    pub sigma2: f64,
}

/// County negative-test volumes: latent counts constrained to state totals,
/// smoothed by a log-intensity field with a scalar mean.
#[derive(Debug, Clone)]
pub struct TestVolumeParams {
    pub mean: f64,
    pub field: Grid<f64>,
    pub hypers: SpaceTimeHypers,
    pub counts: Grid<i64>,
}

/// County hospital admissions: latent counts constrained to state totals,
/// Poisson in the infected count with log-intensity `omega` whose mean is a
/// regional intercept field.
#[derive(Debug, Clone)]
pub struct AdmissionModelParams {
    pub omega: Grid<f64>,
    pub hypers: SpaceTimeHypers,
    pub phi: RegionEffect,
    pub counts: Grid<i64>,
}

/// Logit-normal parent of one family of site-level probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParent {
    pub mean: f64,
    pub var: f64,
}

/// Per-hospital flow probabilities: direct-ICU admission split and the four
/// exit probabilities (floor to ICU, floor discharge, ICU to floor, ICU
/// discharge).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFlowParams {
    pub direct_icu: f64,
    pub exits: [f64; 4],
}

pub const N_EXITS: usize = 4;

/// Hospital flow parameters across sites with shared logit-normal parents.
#[derive(Debug, Clone, PartialEq)]
pub struct HospitalFlowParams {
    pub sites: Vec<SiteFlowParams>,
    pub direct_icu_parent: FlowParent,
    pub exit_parents: [FlowParent; N_EXITS],
}

/// Complete state of one MCMC chain.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    /// Daily infected-to-removed probability.
    pub removal_prob: f64,
    /// Daily removed-to-susceptible probability.
    pub waning_prob: f64,
    /// Probability a reported vaccination immunizes.
    pub vax_efficacy: f64,
    pub transmission: TransmissionParams,
    pub detection: DetectionModelParams,
    pub tests: TestVolumeParams,
    pub admissions: Option<AdmissionModelParams>,
    pub flow: HospitalFlowParams,
    pub traj: CompartmentTrajectory,
}

/// Prior specification. Pairs are (shape-like, rate-like) in the
/// conventional parameterization of each family.
#[derive(Debug, Clone)]
pub struct Priors {
    /// Beta prior on the daily removal probability.
    pub theta: (f64, f64),
    /// Beta prior on the daily waning probability.
    pub vartheta: (f64, f64),
    /// Beta prior on vaccine efficacy.
    pub vax_efficacy: (f64, f64),
    /// Inverse-gamma (shape, scale) on the transmission day-noise variance.
    pub sigma2: (f64, f64),
    /// Inverse-gamma (shape, scale) on the detection noise variance.
    pub sigma_tilde2: (f64, f64),
    /// Normal sd of the detection intercept and slope.
    pub beta_tilde_sd: f64,
    /// Normal sd of scalar fixed effects.
    pub beta_sd: f64,
    /// Gamma (shape, rate) on every field precision.
    pub tau: (f64, f64),
    /// Normal sd of parent means (regional intercepts, covariate slopes,
    /// test-volume level).
    pub parent_mean_sd: f64,
    /// Normal sd of hospital-flow parent means on the logit scale.
    pub flow_mean_sd: f64,
    /// Inverse-gamma (shape, scale) on hospital-flow parent variances.
    pub flow_var: (f64, f64),
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            theta: (10.0, 130.0),
            vartheta: (10.0, 3650.0),
            vax_efficacy: (160.0, 40.0),
            sigma2: (3.0, 0.2),
            sigma_tilde2: (3.0, 0.5),
            beta_tilde_sd: 10.0,
            beta_sd: 10.0,
            tau: (1.0, 0.01),
            parent_mean_sd: 10.0,
            flow_mean_sd: 2.0,
            flow_var: (3.0, 1.0),
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let pos_pair = |name: &str, (a, b): (f64, f64)| {
            if a > 0.0 && b > 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} prior needs positive parameters")))
            }
        };
        pos_pair("theta", self.theta)?;
        pos_pair("vartheta", self.vartheta)?;
        pos_pair("vax_efficacy", self.vax_efficacy)?;
        pos_pair("sigma2", self.sigma2)?;
        pos_pair("sigma_tilde2", self.sigma_tilde2)?;
        pos_pair("tau", self.tau)?;
        pos_pair("flow_var", self.flow_var)?;
        for (name, v) in [
            ("beta_tilde_sd", self.beta_tilde_sd),
            ("beta_sd", self.beta_sd),
            ("parent_mean_sd", self.parent_mean_sd),
            ("flow_mean_sd", self.flow_mean_sd),
        ] {
            if v <= 0.0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

impl ParameterSet {
    /// Deterministic initialization with a finite log-posterior by
    /// construction: latent infections at twice the reported counts, a
    /// removal skeleton at the prior-mean rate (which keeps the infected
    /// pool positive), fields at their means, scalars at prior means.
    pub fn init(ctx: &ModelContext, priors: &Priors) -> Result<ParameterSet> {
        priors.validate()?;
        let n_regions = ctx.n_regions();
        let n_days = ctx.n_days();
        let populations = ctx.populations();

        let theta0 = priors.theta.0 / (priors.theta.0 + priors.theta.1);
        let vartheta0 = priors.vartheta.0 / (priors.vartheta.0 + priors.vartheta.1);
        let pi0 = priors.vax_efficacy.0 / (priors.vax_efficacy.0 + priors.vax_efficacy.1);

        let mut traj = CompartmentTrajectory::empty(populations.clone(), n_days);
        for r in 0..n_regions {
            let Some(t0) = ctx.start_days[r] else { continue };
            traj.seed(r, t0, ctx.data.reported_cases.get(r, t0));
            let mut i_prev = traj.infected.get(r, t0);
            let mut r_prev = 0i64;
            for t in (t0 + 1)..n_days {
                let reported = ctx.data.reported_cases.get(r, t);
                let s_prev = populations[r] - i_prev - r_prev;
                let y = (2 * reported).min(s_prev);
                if y < reported {
                    return Err(Error::Data(format!(
                        "region {r} reports {reported} cases on day {t} with only {s_prev} susceptible"
                    )));
                }
                // Rounding the expected removals keeps the pool at or above
                // one infected individual for any realistic rate.
                let c = ((theta0 * i_prev as f64).round() as i64).min(i_prev);
                let d = ((vartheta0 * r_prev as f64).round() as i64).min(r_prev);
                let lagged = ctx.lagged_vax(r, t);
                let headroom = populations[r] - (i_prev - c + y) - (r_prev - d + c);
                let e = ((pi0 * lagged as f64).round() as i64).min(lagged).min(headroom.max(0));
                traj.y.set(r, t, y);
                traj.c.set(r, t, c);
                traj.d.set(r, t, d);
                traj.e.set(r, t, e);
                i_prev = i_prev - c + y;
                r_prev = r_prev - d + c + e;
            }
            traj.recompute_region(r);
            debug_assert!(traj.region_is_valid(r));
        }

        // Crude transmission level from the aggregate infection balance:
        // total new infections against total exposure pressure.
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..n_regions {
            let Some(t0) = ctx.start_days[r] else { continue };
            for t in (t0 + 1)..n_days {
                num += traj.y.get(r, t) as f64;
                den += traj.infected.get(r, t - 1) as f64 * traj.susceptible(r, t - 1) as f64
                    / populations[r] as f64;
            }
        }
        let mu0 = if num > 0.0 && den > 0.0 { (num / den).ln() } else { (0.1f64).ln() };

        let transmission = TransmissionParams {
            mu: Grid::filled(n_regions, n_days, mu0),
            hypers: SpaceTimeHypers { tau: 1.0, rho_s: 0.5, rho_t: 0.5 },
            phi: RegionEffect::constant(n_regions, mu0),
            alphas: ctx
                .random_covariates
                .iter()
                .map(|_| RegionEffect::constant(n_regions, 0.0))
                .collect(),
            betas: vec![0.0; ctx.fixed_covariates.len()],
            epsilon: Grid::zeros(n_regions, n_days),
            sigma2: 0.05,
        };

        // Detection starts at probability one half everywhere, matching the
        // doubled latent counts.
        let detection = DetectionModelParams {
            intercept: 0.0,
            slope: 0.0,
            noise: Grid::zeros(n_regions, n_days),
            sigma2: 0.1,
        };

        // Population-proportional deterministic allocation of negative
        // tests, exact by largest-remainder rounding.
        let mut test_counts = Grid::<i64>::zeros(n_regions, n_days);
        for (state, regions) in &ctx.state_regions {
            let weights: Vec<f64> =
                regions.iter().map(|&r| populations[r] as f64).collect();
            let wsum: f64 = weights.iter().sum();
            for t in 0..n_days {
                let total = ctx.negative_tests[state][t];
                let alloc = largest_remainder(total, &weights, wsum);
                for (k, &r) in regions.iter().enumerate() {
                    test_counts.set(r, t, alloc[k]);
                }
            }
        }
        let field = test_counts.map(|m| ((m as f64).max(0.5)).ln());
        let mean_m = field.flat().iter().sum::<f64>() / field.flat().len() as f64;
        let tests = TestVolumeParams {
            mean: mean_m,
            field,
            hypers: SpaceTimeHypers { tau: 1.0, rho_s: 0.5, rho_t: 0.5 },
            counts: test_counts,
        };

        let admissions = if let Some(state_adms) = &ctx.data.state_admissions {
            let mut counts = Grid::<i64>::zeros(n_regions, n_days);
            let mut total_h = 0i64;
            let mut total_i = 0i64;
            for (state, series) in state_adms {
                let regions = &ctx.state_regions[state];
                for t in 0..n_days {
                    let weights: Vec<f64> =
                        regions.iter().map(|&r| traj.infected.get(r, t) as f64).collect();
                    let wsum: f64 = weights.iter().sum();
                    if series[t] > 0 && wsum <= 0.0 {
                        return Err(Error::Data(format!(
                            "state '{state}' admissions on day {t} precede any infections"
                        )));
                    }
                    let alloc = if series[t] == 0 {
                        vec![0; regions.len()]
                    } else {
                        largest_remainder(series[t], &weights, wsum)
                    };
                    for (k, &r) in regions.iter().enumerate() {
                        counts.set(r, t, alloc[k].min(traj.infected.get(r, t)));
                    }
                    total_h += series[t];
                    total_i += weights.iter().sum::<f64>() as i64;
                }
            }
            // Clamping to the infected pool can break the state sums; repair
            // by re-running the exact allocator on the clamped capacities.
            for (state, series) in state_adms {
                let regions = &ctx.state_regions[state];
                for t in 0..n_days {
                    let have: i64 = regions.iter().map(|&r| counts.get(r, t)).sum();
                    if have != series[t] {
                        let caps: Vec<i64> =
                            regions.iter().map(|&r| traj.infected.get(r, t)).collect();
                        let alloc = capped_allocation(series[t], &caps).ok_or_else(|| {
                            Error::Data(format!(
                                "state '{state}' admissions on day {t} exceed the infected pool"
                            ))
                        })?;
                        for (k, &r) in regions.iter().enumerate() {
                            counts.set(r, t, alloc[k]);
                        }
                    }
                }
            }
            let omega0 = ((total_h as f64 + 1.0) / (total_i as f64 + 1.0)).ln();
            Some(AdmissionModelParams {
                omega: Grid::filled(n_regions, n_days, omega0),
                hypers: SpaceTimeHypers { tau: 1.0, rho_s: 0.5, rho_t: 0.5 },
                phi: RegionEffect::constant(n_regions, omega0),
                counts,
            })
        } else {
            None
        };

        let site_init = |config: &crate::hospital::HospitalConfig| SiteFlowParams {
            direct_icu: config.direct_icu_prob,
            exits: [
                config.transition_probs.prob(0, 1),
                config.transition_probs.prob(0, 2),
                config.transition_probs.prob(1, 0),
                config.transition_probs.prob(1, 2),
            ],
        };
        let sites: Vec<SiteFlowParams> =
            ctx.hospital_configs.iter().map(site_init).collect();
        let parent_of = |vals: Vec<f64>, fallback: f64| FlowParent {
            mean: if vals.is_empty() {
                fallback
            } else {
                vals.iter().map(|&v| logit(v)).sum::<f64>() / vals.len() as f64
            },
            var: 0.25,
        };
        let flow = HospitalFlowParams {
            direct_icu_parent: parent_of(
                sites.iter().map(|s| s.direct_icu).collect(),
                logit(0.2),
            ),
            exit_parents: std::array::from_fn(|k| {
                parent_of(sites.iter().map(|s| s.exits[k]).collect(), logit(0.1))
            }),
            sites,
        };

        Ok(ParameterSet {
            removal_prob: theta0,
            waning_prob: vartheta0,
            vax_efficacy: pi0,
            transmission,
            detection,
            tests,
            admissions,
            flow,
            traj,
        })
    }

    /// Structural invariants: probabilities interior, precisions positive,
    /// correlations in range, latent counts within support.
    pub fn validate(&self, ctx: &ModelContext) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} = {v} outside (0, 1)")))
            }
        };
        prob("removal_prob", self.removal_prob)?;
        prob("waning_prob", self.waning_prob)?;
        prob("vax_efficacy", self.vax_efficacy)?;
        for site in &self.flow.sites {
            prob("direct_icu", site.direct_icu)?;
            for &e in &site.exits {
                prob("flow exit", e)?;
            }
            if site.exits[0] + site.exits[1] > 1.0 || site.exits[2] + site.exits[3] > 1.0 {
                return Err(Error::Parameter("flow exits exceed one".into()));
            }
        }
        let st = |name: &str, h: &SpaceTimeHypers| {
            if h.tau <= 0.0 {
                return Err(Error::Parameter(format!("{name} tau must be positive")));
            }
            if !(0.0..1.0).contains(&h.rho_s) || h.rho_t.abs() >= 1.0 {
                return Err(Error::Parameter(format!("{name} correlation out of range")));
            }
            Ok(())
        };
        st("transmission", &self.transmission.hypers)?;
        st("tests", &self.tests.hypers)?;
        let rg = |name: &str, h: &RegionHypers| {
            if h.tau <= 0.0 || !(0.0..1.0).contains(&h.rho) {
                Err(Error::Parameter(format!("{name} hypers out of range")))
            } else {
                Ok(())
            }
        };
        rg("phi", &self.transmission.phi.hypers)?;
        for a in &self.transmission.alphas {
            rg("alpha", &a.hypers)?;
        }
        if self.transmission.sigma2 <= 0.0 || self.detection.sigma2 <= 0.0 {
            return Err(Error::Parameter("noise variances must be positive".into()));
        }
        if let Some(adm) = &self.admissions {
            st("admissions", &adm.hypers)?;
            rg("admission phi", &adm.phi.hypers)?;
            if adm.counts.flat().iter().any(|&h| h < 0) {
                return Err(Error::Parameter("negative admission counts".into()));
            }
        }
        if self.tests.counts.flat().iter().any(|&m| m < 0) {
            return Err(Error::Parameter("negative test counts".into()));
        }
        for r in 0..ctx.n_regions() {
            if !self.traj.region_is_valid(r) {
                return Err(Error::Parameter(format!("region {r} trajectory out of support")));
            }
            if let Some(t0) = ctx.start_days[r] {
                for t in t0..ctx.n_days() {
                    if self.traj.y.get(r, t) < ctx.data.reported_cases.get(r, t) {
                        return Err(Error::Parameter(format!(
                            "latent infections below reported cases at region {r} day {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Named scalar values tracked by diagnostics and the draw files.
    pub fn tracked_scalars(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("theta".to_string(), self.removal_prob),
            ("vartheta".to_string(), self.waning_prob),
            ("vax_efficacy".to_string(), self.vax_efficacy),
            ("sigma2".to_string(), self.transmission.sigma2),
            ("sigma_tilde2".to_string(), self.detection.sigma2),
            ("beta_tilde_1".to_string(), self.detection.intercept),
            ("beta_tilde_2".to_string(), self.detection.slope),
            ("tau_mu".to_string(), self.transmission.hypers.tau),
            ("rho_s_mu".to_string(), self.transmission.hypers.rho_s),
            ("rho_t_mu".to_string(), self.transmission.hypers.rho_t),
            ("tau_phi".to_string(), self.transmission.phi.hypers.tau),
            ("rho_phi".to_string(), self.transmission.phi.hypers.rho),
            ("mu_phi".to_string(), self.transmission.phi.hypers.parent_mean),
            ("mean_m".to_string(), self.tests.mean),
            ("tau_m".to_string(), self.tests.hypers.tau),
        ];
        for (k, a) in self.transmission.alphas.iter().enumerate() {
            out.push((format!("tau_alpha_{k}"), a.hypers.tau));
            out.push((format!("mu_alpha_{k}"), a.hypers.parent_mean));
        }
        for (j, b) in self.transmission.betas.iter().enumerate() {
            out.push((format!("beta_{j}"), *b));
        }
        if let Some(adm) = &self.admissions {
            out.push(("tau_omega".to_string(), adm.hypers.tau));
            out.push(("rho_s_omega".to_string(), adm.hypers.rho_s));
            out.push(("rho_t_omega".to_string(), adm.hypers.rho_t));
            out.push(("phi_omega_mean".to_string(), adm.phi.hypers.parent_mean));
        }
        out
    }
}

/// Exact-sum proportional allocation by largest remainder. All weights zero
/// (or a zero total) puts everything at zero except a forced total, which
/// lands on the first county.
fn largest_remainder(total: i64, weights: &[f64], wsum: f64) -> Vec<i64> {
    if total <= 0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    if wsum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut out: Vec<i64> = shares.iter().map(|s| s.floor() as i64).collect();
    let mut left = total - out.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut idx = 0usize;
    while left > 0 {
        out[order[idx % order.len()]] += 1;
        left -= 1;
        idx += 1;
    }
    debug_assert_eq!(out.iter().sum::<i64>(), total);
    out
}

/// Allocation under per-cell caps, proportional to the caps. Returns `None`
/// if the caps cannot absorb the total.
fn capped_allocation(total: i64, caps: &[i64]) -> Option<Vec<i64>> {
    let capacity: i64 = caps.iter().sum();
    if total > capacity {
        return None;
    }
    let mut out = vec![0i64; caps.len()];
    let mut left = total;
    // Greedy proportional fill, then sweep up the remainder.
    for (k, &cap) in caps.iter().enumerate() {
        let share = ((total as f64) * (cap as f64) / (capacity.max(1) as f64)).floor() as i64;
        out[k] = share.min(cap);
        left -= out[k];
    }
    for (k, &cap) in caps.iter().enumerate() {
        while left > 0 && out[k] < cap {
            out[k] += 1;
            left -= 1;
        }
    }
    (left == 0).then_some(out)
}

/// Layout of the flat draw encoding: named segments with lengths, in order.
pub fn flat_layout(ctx: &ModelContext) -> Vec<(String, usize)> {
    let n = ctx.n_regions();
    let cells = n * ctx.n_days();
    let mut layout = vec![
        ("theta".to_string(), 1),
        ("vartheta".to_string(), 1),
        ("vax_efficacy".to_string(), 1),
        ("sigma2".to_string(), 1),
        ("mu_hypers".to_string(), 3),
        ("phi_hypers".to_string(), 3),
        ("phi".to_string(), n),
    ];
    for k in 0..ctx.random_covariates.len() {
        layout.push((format!("alpha_hypers_{k}"), 3));
        layout.push((format!("alpha_{k}"), n));
    }
    layout.push(("betas".to_string(), ctx.fixed_covariates.len()));
    layout.push(("mu".to_string(), cells));
    layout.push(("epsilon".to_string(), cells));
    layout.push(("detection".to_string(), 3)); // intercept, slope, sigma2
    layout.push(("epsilon_tilde".to_string(), cells));
    layout.push(("tests_hypers".to_string(), 4)); // mean, tau, rho_s, rho_t
    layout.push(("tests_field".to_string(), cells));
    layout.push(("tests_counts".to_string(), cells));
    if ctx.has_admissions() {
        layout.push(("omega_hypers".to_string(), 3));
        layout.push(("omega_phi_hypers".to_string(), 3));
        layout.push(("omega_phi".to_string(), n));
        layout.push(("omega".to_string(), cells));
        layout.push(("admission_counts".to_string(), cells));
    }
    let n_sites = ctx.hospital_configs.len();
    layout.push(("flow_sites".to_string(), n_sites * 5));
    layout.push(("flow_parents".to_string(), 10));
    layout.push(("y".to_string(), cells));
    layout.push(("c".to_string(), cells));
    layout.push(("d".to_string(), cells));
    layout.push(("e".to_string(), cells));
    layout
}

pub fn flat_len(ctx: &ModelContext) -> usize {
    flat_layout(ctx).iter().map(|(_, l)| l).sum()
}

impl ParameterSet {
    /// Flattens to the layout of [`flat_layout`]. Counts are exact in f64.
    pub fn to_flat(&self, ctx: &ModelContext) -> Vec<f64> {
        let mut out = Vec::with_capacity(flat_len(ctx));
        out.push(self.removal_prob);
        out.push(self.waning_prob);
        out.push(self.vax_efficacy);
        out.push(self.transmission.sigma2);
        let st = |out: &mut Vec<f64>, h: &SpaceTimeHypers| {
            out.extend([h.tau, h.rho_s, h.rho_t]);
        };
        let rg = |out: &mut Vec<f64>, h: &RegionHypers| {
            out.extend([h.tau, h.rho, h.parent_mean]);
        };
        st(&mut out, &self.transmission.hypers);
        rg(&mut out, &self.transmission.phi.hypers);
        out.extend_from_slice(&self.transmission.phi.values);
        for a in &self.transmission.alphas {
            rg(&mut out, &a.hypers);
            out.extend_from_slice(&a.values);
        }
        out.extend_from_slice(&self.transmission.betas);
        out.extend_from_slice(self.transmission.mu.flat());
        out.extend_from_slice(self.transmission.epsilon.flat());
        out.extend([self.detection.intercept, self.detection.slope, self.detection.sigma2]);
        out.extend_from_slice(self.detection.noise.flat());
        out.push(self.tests.mean);
        st(&mut out, &self.tests.hypers);
        out.extend_from_slice(self.tests.field.flat());
        out.extend(self.tests.counts.flat().iter().map(|&v| v as f64));
        if let Some(adm) = &self.admissions {
            st(&mut out, &adm.hypers);
            rg(&mut out, &adm.phi.hypers);
            out.extend_from_slice(&adm.phi.values);
            out.extend_from_slice(adm.omega.flat());
            out.extend(adm.counts.flat().iter().map(|&v| v as f64));
        }
        for site in &self.flow.sites {
            out.push(site.direct_icu);
            out.extend_from_slice(&site.exits);
        }
        out.extend([self.flow.direct_icu_parent.mean, self.flow.direct_icu_parent.var]);
        for p in &self.flow.exit_parents {
            out.extend([p.mean, p.var]);
        }
        for grid in [&self.traj.y, &self.traj.c, &self.traj.d, &self.traj.e] {
            out.extend(grid.flat().iter().map(|&v| v as f64));
        }
        debug_assert_eq!(out.len(), flat_len(ctx));
        out
    }

    /// Rebuilds a parameter set from its flat encoding. The trajectory's
    /// running states are recomputed from the event series.
    pub fn from_flat(ctx: &ModelContext, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != flat_len(ctx) {
            return Err(Error::Data(format!(
                "draw row has {} values, expected {}",
                flat.len(),
                flat_len(ctx)
            )));
        }
        let n = ctx.n_regions();
        let n_days = ctx.n_days();
        let cells = n * n_days;
        let mut pos = 0usize;
        let mut take = |len: usize| {
            let s = &flat[pos..pos + len];
            pos += len;
            s
        };

        let removal_prob = take(1)[0];
        let waning_prob = take(1)[0];
        let vax_efficacy = take(1)[0];
        let sigma2 = take(1)[0];
        let st = |s: &[f64]| SpaceTimeHypers { tau: s[0], rho_s: s[1], rho_t: s[2] };
        let rg = |s: &[f64]| RegionHypers { tau: s[0], rho: s[1], parent_mean: s[2] };
        let mu_hypers = st(take(3));
        let phi_hypers = rg(take(3));
        let phi = RegionEffect { values: take(n).to_vec(), hypers: phi_hypers };
        let mut alphas = Vec::with_capacity(ctx.random_covariates.len());
        for _ in 0..ctx.random_covariates.len() {
            let hypers = rg(take(3));
            alphas.push(RegionEffect { values: take(n).to_vec(), hypers });
        }
        let betas = take(ctx.fixed_covariates.len()).to_vec();
        let mu = Grid::from_flat(n, n_days, take(cells).to_vec());
        let epsilon = Grid::from_flat(n, n_days, take(cells).to_vec());
        let det = take(3);
        let (intercept, slope, det_sigma2) = (det[0], det[1], det[2]);
        let noise = Grid::from_flat(n, n_days, take(cells).to_vec());
        let tv = take(4);
        let tests_mean = tv[0];
        let tests_hypers = SpaceTimeHypers { tau: tv[1], rho_s: tv[2], rho_t: tv[3] };
        let tests_field = Grid::from_flat(n, n_days, take(cells).to_vec());
        let tests_counts =
            Grid::from_flat(n, n_days, take(cells).iter().map(|&v| v as i64).collect());
        let admissions = if ctx.has_admissions() {
            let hypers = st(take(3));
            let phi_h = rg(take(3));
            let phi_w = RegionEffect { values: take(n).to_vec(), hypers: phi_h };
            let omega = Grid::from_flat(n, n_days, take(cells).to_vec());
            let counts =
                Grid::from_flat(n, n_days, take(cells).iter().map(|&v| v as i64).collect());
            Some(AdmissionModelParams { omega, hypers, phi: phi_w, counts })
        } else {
            None
        };
        let mut sites = Vec::with_capacity(ctx.hospital_configs.len());
        for _ in 0..ctx.hospital_configs.len() {
            let s = take(5);
            sites.push(SiteFlowParams {
                direct_icu: s[0],
                exits: [s[1], s[2], s[3], s[4]],
            });
        }
        let fp = take(10);
        let flow = HospitalFlowParams {
            sites,
            direct_icu_parent: FlowParent { mean: fp[0], var: fp[1] },
            exit_parents: std::array::from_fn(|k| FlowParent {
                mean: fp[2 + 2 * k],
                var: fp[3 + 2 * k],
            }),
        };
        let as_counts =
            |s: &[f64]| Grid::from_flat(n, n_days, s.iter().map(|&v| v as i64).collect());
        let y = as_counts(take(cells));
        let c = as_counts(take(cells));
        let d = as_counts(take(cells));
        let e = as_counts(take(cells));
        let mut traj = CompartmentTrajectory::empty(ctx.populations(), n_days);
        for r in 0..n {
            if let Some(t0) = ctx.start_days[r] {
                traj.seed(r, t0, y.get(r, t0));
            }
        }
        traj.y = y;
        traj.c = c;
        traj.d = d;
        traj.e = e;
        for r in 0..n {
            traj.recompute_region(r);
        }

        Ok(ParameterSet {
            removal_prob,
            waning_prob,
            vax_efficacy,
            transmission: TransmissionParams {
                mu,
                hypers: mu_hypers,
                phi,
                alphas,
                betas,
                epsilon,
                sigma2,
            },
            detection: DetectionModelParams {
                intercept,
                slope,
                noise,
                sigma2: det_sigma2,
            },
            tests: TestVolumeParams {
                mean: tests_mean,
                field: tests_field,
                hypers: tests_hypers,
                counts: tests_counts,
            },
            admissions,
            flow,
            traj,
        })
    }
}

/// Multinomial draw of `total` across `weights`, delegating to the exact
/// sequential-binomial allocator.
pub fn multinomial_split<R: rand::Rng + ?Sized>(
    total: i64,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<i64>> {
    impute_allocation(total, weights, rng)
}
