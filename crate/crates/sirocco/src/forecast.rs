//! Forward simulation from posterior draws.
//!
//! A forecast takes calibrated parameter draws and pushes the model past the
//! end of the data window: covariate series continue as draws from a fitted
//! space-time process, vaccination reports follow a ramp-then-plateau
//! intensity that shuts off at a saturation ceiling, the transmission,
//! test-volume, and admission fields extend by conditional sampling from
//! their own priors given the calibrated history, and the epidemic then runs
//! forward day by day exactly as the likelihood describes it. Hospital
//! censuses evolve on top of each replicate. The ensemble is summarized as
//! empirical quantiles per (region or hospital, day, metric).
//!
//! Every replicate draws from its own named rng stream in a fixed order
//! (saturation, covariates, transmission field, day noise, test volumes,
//! detection noise, admission intensity, vaccination intensity, then the
//! daily simulation loop), so a run is reproducible from the root seed alone
//! and replicates could be generated in any order or in parallel without
//! changing the output.

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson, StandardNormal};

use crate::epi::{
    apply_transitions, step_infections, step_removals, step_vaccination, step_waning,
    CompartmentTrajectory, EpiScalarParams,
};
use crate::error::{Error, Result};
use crate::graph::CountyGraph;
use crate::grid::Grid;
use crate::hospital::{census_forecast, icu_exceedance, HospitalCensus, TransitionMatrix};
use crate::inference::context::ModelContext;
use crate::inference::params::{ParameterSet, SpaceTimeHypers};
use crate::observation::{log_test_rate, RATE_SCALE};
use crate::precision::{ar1_precision, car_precision, kron_precision, CholeskyFactor, SparsePrecision};
use crate::rng::SeedTree;
use crate::stats::{binomial_draw, inv_logit, quantile_sorted};

/// Poisson draw that tolerates a zero or negative rate (no events).
pub(crate) fn poisson_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> i64 {
    if !(rate > 0.0) {
        return 0;
    }
    // The cap keeps an absurd rate from panicking the sampler; max(0) guards
    // the small-rate branch, which can emit -1 when exp(-rate) rounds to 1.
    (Poisson::new(rate.min(1e12)).expect("positive finite rate").sample(rng) as i64).max(0)
}

// ---------------------------------------------------------------------------
// Conditional horizon extension of a separable space-time field.
// ---------------------------------------------------------------------------

/// Conditional law of a field's horizon block given its observed history.
///
/// The field lives on `sites x (n_history + horizon)` cells with separable
/// precision `q_space (x) ar1(rho_t)`, the precision scale folded into
/// `q_space`. Only the horizon block is random; its precision is the dense
/// Cholesky factor of the corresponding sub-block, which has `sites *
/// horizon` cells no matter how long the history is.
///
/// The conditional mean is `mean_F - Q_FF^{-1} Q_FB (x_B - mean_B)`. The
/// second term depends only on the history, so it is precomputed; sampling
/// for a new horizon mean is a single triangular solve.
struct FieldExtension {
    n_sites: usize,
    n_history: usize,
    horizon: usize,
    /// `Q_FF^{-1} Q_FB (x_B - mean_B)`, site-major (`s * horizon + h`).
    correction: Vec<f64>,
    factor: CholeskyFactor,
}

impl FieldExtension {
    fn build(
        q_space: &SparsePrecision,
        rho_t: f64,
        history: &Grid<f64>,
        history_mean: &Grid<f64>,
        horizon: usize,
    ) -> Result<FieldExtension> {
        if horizon == 0 {
            return Err(Error::Parameter("forecast horizon must be at least one day".into()));
        }
        let n_sites = history.n_regions();
        let n_history = history.n_days();
        if q_space.dim() != n_sites
            || history_mean.n_regions() != n_sites
            || history_mean.n_days() != n_history
        {
            return Err(Error::Data("field extension shapes disagree".into()));
        }
        let total = n_history + horizon;
        let qt = ar1_precision(total, rho_t)?;
        let joint = kron_precision(q_space, &qt)?;

        let free: Vec<usize> = (0..n_sites)
            .flat_map(|s| (0..horizon).map(move |h| s * total + n_history + h))
            .collect();

        // Q_FB (x_B - m_B) is the free part of Q d with d zero on the block.
        let mut d = vec![0.0; n_sites * total];
        for s in 0..n_sites {
            for t in 0..n_history {
                d[s * total + t] = history.get(s, t) - history_mean.get(s, t);
            }
        }
        let qd = joint.matvec(&d);
        let v: Vec<f64> = free.iter().map(|&i| qd[i]).collect();

        let factor = CholeskyFactor::of_dense(joint.dense_block(&free)).ok_or_else(|| {
            Error::Precision("horizon block of the extension precision is not positive definite".into())
        })?;
        let correction = factor.solve(&v);
        Ok(FieldExtension { n_sites, n_history, horizon, correction, factor })
    }

    fn conditional_mean(&self, horizon_mean: &[f64]) -> Vec<f64> {
        debug_assert_eq!(horizon_mean.len(), self.correction.len());
        horizon_mean
            .iter()
            .zip(&self.correction)
            .map(|(m, u)| m - u)
            .collect()
    }

    /// One draw of the horizon block, site-major, for the given mean block.
    fn sample<R: Rng + ?Sized>(&self, horizon_mean: &[f64], rng: &mut R) -> Vec<f64> {
        let n = self.correction.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let pert = self.factor.solve_lt(&z);
        let mean = self.conditional_mean(horizon_mean);
        mean.iter().zip(&pert).map(|(m, p)| m + p).collect()
    }

    /// Per-cell conditional variance, site-major. Quadratic in the block
    /// size, which stays small at forecasting scales.
    fn marginal_variances(&self) -> Vec<f64> {
        let n = self.correction.len();
        let mut unit = vec![0.0; n];
        (0..n)
            .map(|i| {
                unit[i] = 1.0;
                let col = self.factor.solve(&unit);
                unit[i] = 0.0;
                col[i]
            })
            .collect()
    }
}

/// Copies a history grid and splices a site-major horizon block after it.
fn with_horizon(history: &Grid<f64>, horizon: usize, block: &[f64]) -> Grid<f64> {
    let (nr, t0) = (history.n_regions(), history.n_days());
    debug_assert_eq!(block.len(), nr * horizon);
    let mut g = Grid::zeros(nr, t0 + horizon);
    for r in 0..nr {
        g.row_mut(r)[..t0].copy_from_slice(history.row(r));
        for h in 0..horizon {
            g.set(r, t0 + h, block[r * horizon + h]);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Covariate continuation.
// ---------------------------------------------------------------------------

/// Precision of an exchangeable correlation across `k` series: the inverse
/// of `(1 - corr) I + corr J`, scaled by `scale`.
fn exchangeable_precision(k: usize, corr: f64, scale: f64) -> Result<SparsePrecision> {
    if k == 0 {
        return Err(Error::Parameter("exchangeable block needs at least one series".into()));
    }
    if !(0.0..1.0).contains(&corr) {
        return Err(Error::Parameter(format!("cross-series correlation {corr} outside [0, 1)")));
    }
    if scale <= 0.0 {
        return Err(Error::Parameter("precision scale must be positive".into()));
    }
    let denom = 1.0 + (k as f64 - 1.0) * corr;
    let diag = scale / (1.0 - corr) * (1.0 - corr / denom);
    let off = -scale * corr / ((1.0 - corr) * denom);
    let mut entries = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        entries.push((i, i, diag));
        if off != 0.0 {
            for j in (i + 1)..k {
                entries.push((i, j, off));
            }
        }
    }
    SparsePrecision::from_triplets(k, &entries)
}

/// Stationary model of the observed covariate series, fitted by moments and
/// profile likelihood: per-(series, region) mean levels, per-series scales,
/// and a separable correlation over series type, space, and time.
///
/// Forecasts are draws from the conditional distribution of the horizon
/// given the whole observed history, so every replicate continues the
/// series differently.
#[derive(Debug, Clone)]
pub struct CovariateProcess {
    /// Mean level per series per region.
    pub means: Vec<Vec<f64>>,
    /// Residual scale per series; residuals are standardized before the
    /// joint correlation model applies.
    pub scales: Vec<f64>,
    pub rho_s: f64,
    pub rho_t: f64,
    /// Exchangeable correlation across the series dimension.
    pub cross_corr: f64,
    /// Precision scale of the standardized joint field.
    pub tau: f64,
}

const TAU_FLOOR: f64 = 1e-12;
const TAU_CAP: f64 = 1e12;

impl CovariateProcess {
    /// Fits means, scales, and correlation parameters to observed series.
    /// Correlations are chosen from a coarse candidate grid by profile
    /// likelihood with the precision scale solved in closed form; that is
    /// plenty for continuation, where the conditional mean is dominated by
    /// the recent history anyway.
    ///
    /// # Errors
    ///
    /// No series, or shapes that disagree with the graph.
    pub fn fit(graph: &CountyGraph, series: &[&Grid<f64>]) -> Result<CovariateProcess> {
        let k = series.len();
        if k == 0 {
            return Err(Error::Data("no covariate series to fit".into()));
        }
        let n_regions = graph.n_regions();
        let n_days = series[0].n_days();
        for s in series {
            if s.n_regions() != n_regions || s.n_days() != n_days {
                return Err(Error::Data("covariate series shapes disagree".into()));
            }
        }

        let mut means = Vec::with_capacity(k);
        let mut scales = Vec::with_capacity(k);
        let mut resid: Vec<Grid<f64>> = Vec::with_capacity(k);
        for s in series {
            let m: Vec<f64> = (0..n_regions)
                .map(|r| s.row(r).iter().sum::<f64>() / n_days as f64)
                .collect();
            let mut dev = Grid::zeros(n_regions, n_days);
            let mut ss = 0.0;
            for r in 0..n_regions {
                for t in 0..n_days {
                    let d = s.get(r, t) - m[r];
                    dev.set(r, t, d);
                    ss += d * d;
                }
            }
            let scale = (ss / (n_regions * n_days) as f64).sqrt().max(1e-9);
            means.push(m);
            scales.push(scale);
            resid.push(dev);
        }

        let joint = standardized_joint(&resid, &scales);
        let n = joint.len() as f64;

        let rho_s_grid = [0.0, 0.3, 0.6, 0.9];
        let rho_t_grid = [0.0, 0.3, 0.6, 0.9, 0.97];
        let cross_grid: &[f64] = if k == 1 { &[0.0] } else { &[0.0, 0.3, 0.6] };

        let mut best = (0.0, 0.0, 0.0, 1.0, f64::NEG_INFINITY);
        for &rs in &rho_s_grid {
            let qs = car_precision(graph, rs, 1.0)?;
            let lds = qs.log_det()?;
            for &rt in &rho_t_grid {
                let qt = ar1_precision(n_days, rt)?;
                let ldt = qt.log_det()?;
                let q_st = kron_precision(&qs, &qt)?;
                for &c in cross_grid {
                    let qk = exchangeable_precision(k, c, 1.0)?;
                    let ldk = qk.log_det()?;
                    let q = kron_precision(&qk, &q_st)?;
                    let quad = q.quadform(&joint, &[]);
                    let tau = (n / quad.max(1e-300)).clamp(TAU_FLOOR, TAU_CAP);
                    // Profile log likelihood up to constants:
                    // n ln(tau) + log det of the unit-scale precision.
                    let logdet = (n_regions * n_days) as f64 * ldk
                        + (k * n_days) as f64 * lds
                        + (k * n_regions) as f64 * ldt;
                    let score = n * tau.ln() + logdet;
                    if score > best.4 {
                        best = (rs, rt, c, tau, score);
                    }
                }
            }
        }

        Ok(CovariateProcess {
            means,
            scales,
            rho_s: best.0,
            rho_t: best.1,
            cross_corr: best.2,
            tau: best.3,
        })
    }

    /// Precomputes the conditional law of the horizon given the observed
    /// series, shared by every replicate.
    ///
    /// # Errors
    ///
    /// Zero horizon, or series shapes that disagree with the fit.
    pub fn extension(
        &self,
        graph: &CountyGraph,
        series: &[&Grid<f64>],
        horizon: usize,
    ) -> Result<CovariateExtension> {
        let k = self.means.len();
        if series.len() != k {
            return Err(Error::Data("covariate series count disagrees with the fitted process".into()));
        }
        let n_regions = graph.n_regions();
        let n_days = series.first().map_or(0, |s| s.n_days());
        for (idx, s) in series.iter().enumerate() {
            if s.n_regions() != n_regions || s.n_days() != n_days || self.means[idx].len() != n_regions {
                return Err(Error::Data("covariate series shapes disagree".into()));
            }
        }

        let resid: Vec<Grid<f64>> = series
            .iter()
            .enumerate()
            .map(|(idx, s)| {
                let mut dev = Grid::zeros(n_regions, n_days);
                for r in 0..n_regions {
                    for t in 0..n_days {
                        dev.set(r, t, s.get(r, t) - self.means[idx][r]);
                    }
                }
                dev
            })
            .collect();
        let joint = standardized_joint(&resid, &self.scales);
        let history = Grid::from_flat(k * n_regions, n_days, joint);

        // Precision scale folded into the series factor; the joint spatial
        // factor is (series block) (x) (county CAR).
        let q_cross = exchangeable_precision(k, self.cross_corr, self.tau)?;
        let q_space = kron_precision(&q_cross, &car_precision(graph, self.rho_s, 1.0)?)?;
        let zeros = Grid::zeros(k * n_regions, n_days);
        let ext = FieldExtension::build(&q_space, self.rho_t, &history, &zeros, horizon)?;

        Ok(CovariateExtension {
            history: series.iter().map(|s| (*s).clone()).collect(),
            means: self.means.clone(),
            scales: self.scales.clone(),
            n_regions,
            horizon,
            ext,
        })
    }
}

fn standardized_joint(resid: &[Grid<f64>], scales: &[f64]) -> Vec<f64> {
    let k = resid.len();
    let (n_regions, n_days) = (resid[0].n_regions(), resid[0].n_days());
    let mut joint = vec![0.0; k * n_regions * n_days];
    for (idx, dev) in resid.iter().enumerate() {
        for r in 0..n_regions {
            for t in 0..n_days {
                joint[(idx * n_regions + r) * n_days + t] = dev.get(r, t) / scales[idx];
            }
        }
    }
    joint
}

/// Reusable conditional continuation of a set of covariate series.
pub struct CovariateExtension {
    history: Vec<Grid<f64>>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
    n_regions: usize,
    horizon: usize,
    ext: FieldExtension,
}

impl CovariateExtension {
    /// Draws one continuation: each returned grid holds the observed series
    /// followed by `horizon` forecast days.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Grid<f64>> {
        let zeros = vec![0.0; self.ext.correction.len()];
        let std_draw = self.ext.sample(&zeros, rng);
        let mut out = Vec::with_capacity(self.history.len());
        for (k, hist) in self.history.iter().enumerate() {
            let mut block = vec![0.0; self.n_regions * self.horizon];
            for r in 0..self.n_regions {
                let site = k * self.n_regions + r;
                for h in 0..self.horizon {
                    block[r * self.horizon + h] =
                        self.means[k][r] + self.scales[k] * std_draw[site * self.horizon + h];
                }
            }
            out.push(with_horizon(hist, self.horizon, &block));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Vaccination continuation.
// ---------------------------------------------------------------------------

/// Piecewise-linear schedule of the baseline dose intensity: zero before
/// `ramp_start`, rising linearly to the full rate at `plateau_start`, and
/// constant afterwards. Day indices count from the start of the data window
/// and may be negative when the ramp predates it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSchedule {
    pub ramp_start: i64,
    pub plateau_start: i64,
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.plateau_start <= self.ramp_start {
            return Err(Error::Parameter(
                "vaccination plateau must start after the ramp".into(),
            ));
        }
        Ok(())
    }

    /// Fraction of the plateau rate in effect on `day`.
    pub fn value(&self, day: i64) -> f64 {
        if day <= self.ramp_start {
            0.0
        } else if day >= self.plateau_start {
            1.0
        } else {
            (day - self.ramp_start) as f64 / (self.plateau_start - self.ramp_start) as f64
        }
    }
}

/// Prior on the fraction of a region's population that will ever accept
/// vaccination: a scaled Beta on [lower, upper].
#[derive(Debug, Clone, Copy)]
pub struct SaturationPrior {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SaturationPrior {
    fn default() -> Self {
        // Mean 0.60 on [0.50, 0.75].
        SaturationPrior { lower: 0.50, upper: 0.75, alpha: 4.0, beta: 6.0 }
    }
}

impl SaturationPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.lower < self.upper && self.upper <= 1.0) {
            return Err(Error::Parameter("saturation bounds must satisfy 0 < lower < upper <= 1".into()));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Parameter("saturation Beta parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.lower + (self.upper - self.lower) * self.alpha / (self.alpha + self.beta)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let b = Beta::new(self.alpha, self.beta).expect("validated Beta parameters");
        self.lower + (self.upper - self.lower) * b.sample(rng)
    }
}

/// Dose-report model fitted to the observed series: a per-region plateau
/// rate estimated under the ramp schedule, plus a log-scale wiggle field
/// that carries recent deviations from the baseline into the horizon.
#[derive(Debug, Clone)]
pub struct VaccinationModel {
    /// Doses per day at full ramp, per region.
    pub plateau_rate: Vec<f64>,
    pub ramp: RampSchedule,
    pub wiggle_hypers: SpaceTimeHypers,
    /// Log deviation of observed doses from the ramp baseline; zero where
    /// the baseline is zero (nothing to deviate from).
    wiggle: Grid<f64>,
}

impl VaccinationModel {
    /// # Errors
    ///
    /// Invalid ramp or wiggle hyperparameters.
    pub fn fit(
        raw: &Grid<i64>,
        ramp: RampSchedule,
        wiggle_hypers: SpaceTimeHypers,
    ) -> Result<VaccinationModel> {
        ramp.validate()?;
        if wiggle_hypers.tau <= 0.0
            || !(0.0..1.0).contains(&wiggle_hypers.rho_s)
            || wiggle_hypers.rho_t.abs() >= 1.0
        {
            return Err(Error::Parameter("wiggle hyperparameters out of range".into()));
        }
        let (n_regions, n_days) = (raw.n_regions(), raw.n_days());
        let weights: Vec<f64> = (0..n_days).map(|t| ramp.value(t as i64)).collect();
        let weight_sum: f64 = weights.iter().sum();

        let mut plateau_rate = Vec::with_capacity(n_regions);
        for r in 0..n_regions {
            let total: i64 = raw.row(r).iter().sum();
            let rate = if total == 0 {
                0.0
            } else if weight_sum > 0.0 {
                total as f64 / weight_sum
            } else {
                // Doses observed entirely before the nominal ramp: treat the
                // window as plateau rather than discard the evidence.
                total as f64 / n_days as f64
            };
            plateau_rate.push(rate);
        }

        let mut wiggle = Grid::zeros(n_regions, n_days);
        for r in 0..n_regions {
            if plateau_rate[r] == 0.0 {
                continue;
            }
            for t in 0..n_days {
                if weights[t] > 0.0 {
                    let base = plateau_rate[r] * weights[t];
                    let obs = (raw.get(r, t) as f64).max(0.5);
                    wiggle.set(r, t, (obs / base).ln());
                }
            }
        }

        Ok(VaccinationModel { plateau_rate, ramp, wiggle_hypers, wiggle })
    }

    /// Conditional continuation of the wiggle field, shared by replicates.
    ///
    /// # Errors
    ///
    /// Zero horizon or a graph that disagrees with the fitted field.
    pub fn extension(&self, graph: &CountyGraph, horizon: usize) -> Result<VaxExtension> {
        let q_space = car_precision(graph, self.wiggle_hypers.rho_s, self.wiggle_hypers.tau)?;
        let zeros = Grid::zeros(self.wiggle.n_regions(), self.wiggle.n_days());
        let ext = FieldExtension::build(&q_space, self.wiggle_hypers.rho_t, &self.wiggle, &zeros, horizon)?;
        let variances = ext.marginal_variances();
        Ok(VaxExtension { ext, variances })
    }

    /// One replicate's dose intensity over the horizon, before any
    /// saturation cutoff. The lognormal mean correction keeps the expected
    /// intensity on the ramp baseline rather than above it.
    pub fn sample_intensity<R: Rng + ?Sized>(&self, ext: &VaxExtension, rng: &mut R) -> Grid<f64> {
        let n_regions = ext.ext.n_sites;
        let horizon = ext.ext.horizon;
        let zeros = vec![0.0; n_regions * horizon];
        let w = ext.ext.sample(&zeros, rng);
        let mut lam = Grid::zeros(n_regions, horizon);
        for r in 0..n_regions {
            for h in 0..horizon {
                let day = (ext.ext.n_history + h) as i64;
                let base = self.ramp.value(day) * self.plateau_rate[r];
                if base > 0.0 {
                    let i = r * horizon + h;
                    lam.set(r, h, base * (w[i] - ext.variances[i] / 2.0).exp());
                }
            }
        }
        lam
    }
}

/// Precomputed conditional continuation of the dose wiggle field.
pub struct VaxExtension {
    ext: FieldExtension,
    variances: Vec<f64>,
}

impl VaxExtension {
    pub fn horizon(&self) -> usize {
        self.ext.horizon
    }
}

/// Forecasts raw dose reports for one replicate. Demand dies at saturation:
/// a region whose cumulative effective vaccinations have reached its ceiling
/// reports zero doses from that day on, and effective vaccinations (doses
/// thinned by efficacy after the reporting lag) never exceed the ceiling.
///
/// # Errors
///
/// Shape mismatches or an efficacy outside [0, 1].
#[allow(clippy::too_many_arguments)]
pub fn forecast_vaccinations<R: Rng + ?Sized>(
    model: &VaccinationModel,
    ext: &VaxExtension,
    raw_history: &Grid<i64>,
    cum_effective: &[i64],
    ceilings: &[i64],
    efficacy: f64,
    vax_lag_days: usize,
    rng: &mut R,
) -> Result<Grid<i64>> {
    let n_regions = ext.ext.n_sites;
    let n_history = ext.ext.n_history;
    let horizon = ext.ext.horizon;
    if raw_history.n_regions() != n_regions
        || raw_history.n_days() != n_history
        || cum_effective.len() != n_regions
        || ceilings.len() != n_regions
    {
        return Err(Error::Data("vaccination forecast shapes disagree".into()));
    }
    if !(0.0..=1.0).contains(&efficacy) {
        return Err(Error::Parameter(format!("efficacy {efficacy} outside [0, 1]")));
    }

    let lam = model.sample_intensity(ext, rng);
    let mut cum = cum_effective.to_vec();
    let mut raw = Grid::<i64>::zeros(n_regions, horizon);
    for h in 0..horizon {
        let day = n_history + h;
        for r in 0..n_regions {
            if cum[r] < ceilings[r] {
                raw.set(r, h, poisson_draw(lam.get(r, h), rng));
            }
        }
        for r in 0..n_regions {
            let lagged = day.checked_sub(vax_lag_days).map_or(0, |src| {
                if src < n_history {
                    raw_history.get(r, src)
                } else {
                    raw.get(r, src - n_history)
                }
            });
            let e = binomial_draw(lagged, efficacy, rng).min((ceilings[r] - cum[r]).max(0));
            cum[r] += e;
        }
    }
    Ok(raw)
}

// ---------------------------------------------------------------------------
// Posterior-predictive ensemble.
// ---------------------------------------------------------------------------

/// Vaccination-specific forecast knobs.
#[derive(Debug, Clone)]
pub struct VaxOptions {
    pub ramp: RampSchedule,
    /// Hyperparameters of the dose wiggle field. Not fitted: the wiggle is a
    /// smoothness assumption about how recent deviations persist, not
    /// something a short dose history identifies.
    pub wiggle_hypers: SpaceTimeHypers,
    pub saturation: SaturationPrior,
}

impl Default for VaxOptions {
    fn default() -> Self {
        VaxOptions {
            // By default the window opens at the plateau, with the 72-day
            // ramp entirely before it; deployments align these to dates.
            ramp: RampSchedule { ramp_start: -72, plateau_start: 0 },
            wiggle_hypers: SpaceTimeHypers { tau: 25.0, rho_s: 0.3, rho_t: 0.9 },
            saturation: SaturationPrior::default(),
        }
    }
}

/// Forecast run configuration.
#[derive(Debug, Clone)]
pub struct ForecastConfig {
    /// Days to simulate past the data window.
    pub horizon: usize,
    /// Independent forward runs per posterior draw.
    pub replicates_per_draw: usize,
    /// Keep every k-th draw; 1 uses them all.
    pub draw_stride: usize,
    pub vax: VaxOptions,
}

impl ForecastConfig {
    pub fn new(horizon: usize) -> Self {
        ForecastConfig {
            horizon,
            replicates_per_draw: 1,
            draw_stride: 1,
            vax: VaxOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Parameter("forecast horizon must be at least one day".into()));
        }
        if self.replicates_per_draw == 0 {
            return Err(Error::Parameter("need at least one replicate per draw".into()));
        }
        if self.draw_stride == 0 {
            return Err(Error::Parameter("draw stride must be at least one".into()));
        }
        self.vax.ramp.validate()?;
        self.vax.saturation.validate()?;
        Ok(())
    }
}

/// One forward run of the full model from one posterior draw.
#[derive(Debug, Clone)]
pub struct ForecastReplicate {
    /// Index of the originating draw in the input slice.
    pub draw_index: usize,
    pub saturation_fraction: f64,
    /// Calibrated history plus the simulated horizon.
    pub traj: CompartmentTrajectory,
    /// Reported cases over the horizon (detection applied to new infections).
    pub reported: Grid<i64>,
    /// Raw dose reports over the horizon.
    pub raw_vax: Grid<i64>,
    /// Continued covariate series (history plus horizon), regional-effect
    /// covariates first, then fixed-effect ones.
    pub covariates: Vec<Grid<f64>>,
    /// Admission log intensity over the horizon, when the model carries one.
    pub admission_intensity: Option<Grid<f64>>,
    /// Horizon census per hospital, empty without hospital configs.
    pub census: Vec<HospitalCensus>,
}

/// The collected forward runs.
#[derive(Debug, Clone)]
pub struct ForecastEnsemble {
    pub n_history_days: usize,
    pub horizon: usize,
    pub replicates: Vec<ForecastReplicate>,
}

/// Per-draw conditional extensions of the calibrated fields. The Cholesky
/// factors depend only on the draw's correlation parameters, so replicates
/// of the same draw share them.
struct DrawExtensions {
    mu: FieldExtension,
    tests: FieldExtension,
    omega: Option<FieldExtension>,
}

impl DrawExtensions {
    fn build(ctx: &ModelContext, draw: &ParameterSet, horizon: usize) -> Result<DrawExtensions> {
        let n_regions = ctx.n_regions();
        let n_days = ctx.n_days();

        // History mean surface of the transmission field, from the draw's
        // coefficients and the observed covariates.
        let mut mu_mean = Grid::zeros(n_regions, n_days);
        for r in 0..n_regions {
            for t in 0..n_days {
                let mut m = draw.transmission.phi.values[r];
                for (k, cov) in ctx.random_covariates.iter().enumerate() {
                    m += cov.values.get(r, t) * draw.transmission.alphas[k].values[r];
                }
                for (j, cov) in ctx.fixed_covariates.iter().enumerate() {
                    m += cov.values.get(r, t) * draw.transmission.betas[j];
                }
                mu_mean.set(r, t, m);
            }
        }
        let h = &draw.transmission.hypers;
        let mu = FieldExtension::build(
            &car_precision(&ctx.graph, h.rho_s, h.tau)?,
            h.rho_t,
            &draw.transmission.mu,
            &mu_mean,
            horizon,
        )?;

        let th = &draw.tests.hypers;
        let tests = FieldExtension::build(
            &car_precision(&ctx.graph, th.rho_s, th.tau)?,
            th.rho_t,
            &draw.tests.field,
            &Grid::filled(n_regions, n_days, draw.tests.mean),
            horizon,
        )?;

        let omega = match &draw.admissions {
            Some(adm) => {
                let mut mean = Grid::zeros(n_regions, n_days);
                for r in 0..n_regions {
                    for t in 0..n_days {
                        mean.set(r, t, adm.phi.values[r]);
                    }
                }
                Some(FieldExtension::build(
                    &car_precision(&ctx.graph, adm.hypers.rho_s, adm.hypers.tau)?,
                    adm.hypers.rho_t,
                    &adm.omega,
                    &mean,
                    horizon,
                )?)
            }
            None => None,
        };

        Ok(DrawExtensions { mu, tests, omega })
    }
}

/// Copies the calibrated trajectory into a longer window, horizon days
/// zeroed, running states rebuilt.
fn extend_trajectory(
    populations: &[i64],
    hist: &CompartmentTrajectory,
    total_days: usize,
) -> CompartmentTrajectory {
    let n_regions = hist.n_regions();
    let n_hist = hist.n_days();
    let mut traj = CompartmentTrajectory::empty(populations.to_vec(), total_days);
    for r in 0..n_regions {
        if let Some(t0) = hist.start_day(r) {
            traj.seed(r, t0, hist.y.get(r, t0));
        }
    }
    for r in 0..n_regions {
        traj.y.row_mut(r)[..n_hist].copy_from_slice(hist.y.row(r));
        traj.c.row_mut(r)[..n_hist].copy_from_slice(hist.c.row(r));
        traj.d.row_mut(r)[..n_hist].copy_from_slice(hist.d.row(r));
        traj.e.row_mut(r)[..n_hist].copy_from_slice(hist.e.row(r));
        traj.recompute_region(r);
    }
    traj
}

/// Runs the model forward from every selected posterior draw.
///
/// Saturation is enforced twice per region: dose intensity drops to zero
/// once cumulative effective vaccinations (calibrated history included)
/// reach the replicate's ceiling, and effective vaccinations inside the
/// simulation are capped so the ceiling is never crossed even by doses
/// already in the reporting pipeline.
///
/// # Errors
///
/// Invalid config, no draws surviving the stride, hospital configs without
/// an admission model, or any extension failure.
pub fn posterior_predictive(
    ctx: &ModelContext,
    draws: &[ParameterSet],
    cfg: &ForecastConfig,
    seed_tree: &SeedTree,
) -> Result<ForecastEnsemble> {
    cfg.validate()?;
    let used: Vec<usize> = (0..draws.len()).step_by(cfg.draw_stride).collect();
    if used.is_empty() {
        return Err(Error::Data("posterior predictive needs at least one draw".into()));
    }
    if !ctx.hospital_configs.is_empty() && !ctx.has_admissions() {
        return Err(Error::Data(
            "hospital census forecasting needs an admission intensity model; \
             supply state admission series"
                .into(),
        ));
    }
    let horizon = cfg.horizon;
    let populations = ctx.populations();

    let cov_grids: Vec<&Grid<f64>> = ctx
        .random_covariates
        .iter()
        .chain(&ctx.fixed_covariates)
        .map(|c| &c.values)
        .collect();
    let cov_ext = if cov_grids.is_empty() {
        None
    } else {
        let process = CovariateProcess::fit(&ctx.graph, &cov_grids)?;
        Some(process.extension(&ctx.graph, &cov_grids, horizon)?)
    };

    let vax_model = VaccinationModel::fit(&ctx.data.raw_vaccinations, cfg.vax.ramp, cfg.vax.wiggle_hypers)?;
    let vax_ext = vax_model.extension(&ctx.graph, horizon)?;

    let mut replicates = Vec::with_capacity(used.len() * cfg.replicates_per_draw);
    let mut rep_id: u64 = 0;
    for &di in &used {
        let draw = &draws[di];
        let per_draw = DrawExtensions::build(ctx, draw, horizon)?;
        for _ in 0..cfg.replicates_per_draw {
            let mut rng = seed_tree.stream("forecast-replicate", rep_id);
            let mut rep = run_replicate(
                ctx,
                draw,
                di,
                &per_draw,
                cov_ext.as_ref(),
                &vax_model,
                &vax_ext,
                cfg,
                &populations,
                &mut rng,
            )?;
            if !ctx.hospital_configs.is_empty() {
                rep.census = replicate_census(ctx, draw, &rep, seed_tree, rep_id)?;
            }
            replicates.push(rep);
            rep_id += 1;
        }
    }

    Ok(ForecastEnsemble { n_history_days: ctx.n_days(), horizon, replicates })
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    ctx: &ModelContext,
    draw: &ParameterSet,
    draw_index: usize,
    per_draw: &DrawExtensions,
    cov_ext: Option<&CovariateExtension>,
    vax_model: &VaccinationModel,
    vax_ext: &VaxExtension,
    cfg: &ForecastConfig,
    populations: &[i64],
    rng: &mut impl Rng,
) -> Result<ForecastReplicate> {
    let n_regions = ctx.n_regions();
    let n_hist = ctx.n_days();
    let horizon = cfg.horizon;
    let total = n_hist + horizon;
    let n_rand = ctx.random_covariates.len();

    // Fixed draw order; see the module doc.
    let saturation_fraction = cfg.vax.saturation.draw(rng);
    let covariates: Vec<Grid<f64>> = match cov_ext {
        Some(ce) => ce.sample(rng),
        None => Vec::new(),
    };

    // Transmission field over the horizon, mean surface rebuilt from the
    // continued covariates.
    let mut mu_mean_h = vec![0.0; n_regions * horizon];
    for r in 0..n_regions {
        for h in 0..horizon {
            let t = n_hist + h;
            let mut m = draw.transmission.phi.values[r];
            for k in 0..n_rand {
                m += covariates[k].get(r, t) * draw.transmission.alphas[k].values[r];
            }
            for j in 0..ctx.fixed_covariates.len() {
                m += covariates[n_rand + j].get(r, t) * draw.transmission.betas[j];
            }
            mu_mean_h[r * horizon + h] = m;
        }
    }
    let mu_full = with_horizon(&draw.transmission.mu, horizon, &per_draw.mu.sample(&mu_mean_h, rng));

    let mut eps_full = with_horizon(&draw.transmission.epsilon, horizon, &vec![0.0; n_regions * horizon]);
    let eps_sd = draw.transmission.sigma2.sqrt();
    for r in 0..n_regions {
        for h in 0..horizon {
            eps_full.set(r, n_hist + h, rng.sample::<f64, _>(StandardNormal) * eps_sd);
        }
    }

    // Future test volumes drive the detection probability.
    let tests_mean_h = vec![draw.tests.mean; n_regions * horizon];
    let test_field_h = per_draw.tests.sample(&tests_mean_h, rng);
    let mut test_counts_h = Grid::<i64>::zeros(n_regions, horizon);
    for r in 0..n_regions {
        for h in 0..horizon {
            let rate = test_field_h[r * horizon + h].exp();
            test_counts_h.set(r, h, poisson_draw(rate, rng));
        }
    }

    let det_sd = draw.detection.sigma2.sqrt();
    let mut det_noise_h = Grid::<f64>::zeros(n_regions, horizon);
    for r in 0..n_regions {
        for h in 0..horizon {
            det_noise_h.set(r, h, rng.sample::<f64, _>(StandardNormal) * det_sd);
        }
    }

    let admission_intensity = match (&per_draw.omega, &draw.admissions) {
        (Some(ext), Some(adm)) => {
            let mut mean = vec![0.0; n_regions * horizon];
            for r in 0..n_regions {
                for h in 0..horizon {
                    mean[r * horizon + h] = adm.phi.values[r];
                }
            }
            Some(Grid::from_flat(n_regions, horizon, ext.sample(&mean, rng)))
        }
        _ => None,
    };

    let lam = vax_model.sample_intensity(vax_ext, rng);

    // Daily loop: dose reports for every region, then the epidemic step.
    let mut traj = extend_trajectory(populations, &draw.traj, total);
    let mut raw_full = Grid::<i64>::zeros(n_regions, total);
    for r in 0..n_regions {
        raw_full.row_mut(r)[..n_hist].copy_from_slice(ctx.data.raw_vaccinations.row(r));
    }
    let ceilings: Vec<i64> = populations
        .iter()
        .map(|&n| (saturation_fraction * n as f64).floor() as i64)
        .collect();
    let mut cum_effective: Vec<i64> = (0..n_regions)
        .map(|r| draw.traj.e.row(r).iter().sum())
        .collect();
    let scalars = EpiScalarParams {
        removal_prob: draw.removal_prob,
        waning_prob: draw.waning_prob,
        vax_efficacy: draw.vax_efficacy,
        vax_lag_days: ctx.options.vax_lag_days,
    };

    for h in 0..horizon {
        let day = n_hist + h;
        for r in 0..n_regions {
            if cum_effective[r] < ceilings[r] {
                raw_full.set(r, day, poisson_draw(lam.get(r, h), rng));
            }
        }
        for r in 0..n_regions {
            let lagged = day
                .checked_sub(scalars.vax_lag_days)
                .map_or(0, |src| raw_full.get(r, src));
            let cap = (ceilings[r] - cum_effective[r]).max(0);
            if traj.start_day(r).is_some() {
                let i_prev = traj.infected.get(r, day - 1);
                let r_prev = traj.removed.get(r, day - 1);
                let s_prev = traj.susceptible(r, day - 1);
                let y = step_infections(
                    i_prev,
                    s_prev,
                    populations[r],
                    mu_full.get(r, day - 1) + eps_full.get(r, day - 1),
                    rng,
                );
                let c = step_removals(i_prev, scalars.removal_prob, rng);
                let d = step_waning(r_prev, scalars.waning_prob, rng);
                let e = step_vaccination(lagged, scalars.vax_efficacy, rng).min(cap);
                let (i_new, r_new, e_applied) =
                    apply_transitions(i_prev, r_prev, populations[r], y, c, d, e);
                traj.y.set(r, day, y);
                traj.c.set(r, day, c);
                traj.d.set(r, day, d);
                traj.e.set(r, day, e_applied);
                traj.infected.set(r, day, i_new);
                traj.removed.set(r, day, r_new);
                cum_effective[r] += e_applied;
            } else {
                // Inactive region: doses still land and count toward its
                // ceiling, they just have no epidemic to act on.
                let e = step_vaccination(lagged, scalars.vax_efficacy, rng).min(cap);
                cum_effective[r] += e;
            }
        }
    }

    // Detection over the horizon.
    let mut reported = Grid::<i64>::zeros(n_regions, horizon);
    for r in 0..n_regions {
        for h in 0..horizon {
            let lograte = log_test_rate(test_counts_h.get(r, h), populations[r]);
            let pi = inv_logit(
                draw.detection.intercept + draw.detection.slope * lograte + det_noise_h.get(r, h),
            );
            reported.set(r, h, binomial_draw(traj.y.get(r, n_hist + h), pi, rng));
        }
    }

    let mut raw_vax = Grid::<i64>::zeros(n_regions, horizon);
    for r in 0..n_regions {
        raw_vax.row_mut(r).copy_from_slice(&raw_full.row(r)[n_hist..]);
    }

    Ok(ForecastReplicate {
        draw_index,
        saturation_fraction,
        traj,
        reported,
        raw_vax,
        covariates,
        admission_intensity,
        census: Vec::new(),
    })
}

/// Horizon census for one replicate, with the draw's flow probabilities
/// substituted into the hospital configs.
fn replicate_census(
    ctx: &ModelContext,
    draw: &ParameterSet,
    rep: &ForecastReplicate,
    seed_tree: &SeedTree,
    rep_id: u64,
) -> Result<Vec<HospitalCensus>> {
    let n_regions = ctx.n_regions();
    let n_hist = ctx.n_days();
    let horizon = rep.reported.n_days();
    let intensity = rep
        .admission_intensity
        .as_ref()
        .ok_or_else(|| Error::Runtime("census forecast without an admission intensity".into()))?;

    let mut view = CompartmentTrajectory::empty(ctx.populations(), horizon);
    for r in 0..n_regions {
        for h in 0..horizon {
            view.infected.set(r, h, rep.traj.infected.get(r, n_hist + h));
        }
    }
    let mut configs = ctx.hospital_configs.clone();
    for (s, config) in configs.iter_mut().enumerate() {
        let site = &draw.flow.sites[s];
        config.direct_icu_prob = site.direct_icu;
        config.transition_probs =
            TransitionMatrix::from_exit_probs(site.exits[0], site.exits[1], site.exits[2], site.exits[3])?;
    }
    let mut all = census_forecast(
        std::slice::from_ref(&view),
        std::slice::from_ref(intensity),
        &configs,
        ctx.graph.region_ids(),
        &seed_tree.subtree("forecast-census", rep_id),
    )?;
    Ok(all.pop().expect("one replicate in, one out"))
}

// ---------------------------------------------------------------------------
// Summaries.
// ---------------------------------------------------------------------------

pub const METRIC_NEW_CASES: &str = "new_cases";
pub const METRIC_REPORTED_CASES: &str = "reported_cases";
pub const METRIC_CASES_7DAY_PER_100K: &str = "cases_7day_per_100k";
pub const METRIC_RAW_VACCINATIONS: &str = "raw_vaccinations";
pub const METRIC_FLOOR_CENSUS: &str = "floor_census";
pub const METRIC_ICU_CENSUS: &str = "icu_census";
pub const METRIC_ADMISSIONS: &str = "admissions";

/// How quantiles are computed, recorded in output metadata so downstream
/// consumers do not have to guess.
pub const QUANTILE_CONVENTION: &str =
    "linear interpolation between closest order statistics at rank (n - 1) * level";

#[derive(Debug, Clone)]
pub struct SummaryOptions {
    /// Probability levels, each strictly inside (0, 1).
    pub levels: Vec<f64>,
    /// Individual replicate paths exported alongside the quantiles.
    pub max_spaghetti: usize,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions {
            levels: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            max_spaghetti: 10,
        }
    }
}

/// One quantile cell. `day` indexes the full window, history included, so
/// day `n_history_days` is the first forecast day.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub scope: String,
    pub day: usize,
    pub metric: String,
    pub level: f64,
    pub value: f64,
}

/// One replicate-path cell for the spaghetti export.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaghettiRow {
    pub replicate: usize,
    pub scope: String,
    pub day: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct ForecastSummary {
    pub quantiles: Vec<QuantileRow>,
    pub spaghetti: Vec<SpaghettiRow>,
    pub convention: &'static str,
}

#[allow(clippy::too_many_arguments)]
fn emit_metric(
    quantiles: &mut Vec<QuantileRow>,
    spaghetti: &mut Vec<SpaghettiRow>,
    levels: &[f64],
    n_show: usize,
    first_day: usize,
    scope: &str,
    metric: &str,
    series: &[Vec<f64>],
) {
    let horizon = series[0].len();
    for h in 0..horizon {
        let mut vals: Vec<f64> = series.iter().map(|s| s[h]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
        for &level in levels {
            quantiles.push(QuantileRow {
                scope: scope.to_string(),
                day: first_day + h,
                metric: metric.to_string(),
                level,
                value: quantile_sorted(&vals, level),
            });
        }
    }
    for (rep, path) in series.iter().take(n_show).enumerate() {
        for (h, &value) in path.iter().enumerate() {
            spaghetti.push(SpaghettiRow {
                replicate: rep,
                scope: scope.to_string(),
                day: first_day + h,
                metric: metric.to_string(),
                value,
            });
        }
    }
}

/// Trailing 7-day mean of daily reported cases per hundred thousand, per
/// replicate; days reaching back before the horizon use the observed
/// history. Windows clipped by the start of the data use the days they have.
fn seven_day_series(
    ctx: &ModelContext,
    rep: &ForecastReplicate,
    region: usize,
    n_hist: usize,
    horizon: usize,
    population: f64,
) -> Vec<f64> {
    (0..horizon)
        .map(|h| {
            let day = n_hist + h;
            let lo = day.saturating_sub(6);
            let mut sum = 0i64;
            for t in lo..=day {
                sum += if t < n_hist {
                    ctx.data.reported_cases.get(region, t)
                } else {
                    rep.reported.get(region, t - n_hist)
                };
            }
            sum as f64 / (day - lo + 1) as f64 / population * RATE_SCALE
        })
        .collect()
}

/// Reduces an ensemble to per-(scope, day, metric) quantile rows plus a
/// capped spaghetti export of individual replicate paths.
///
/// # Errors
///
/// Empty ensemble, levels outside (0, 1), or ragged replicates.
pub fn summarize(
    ctx: &ModelContext,
    ensemble: &ForecastEnsemble,
    opts: &SummaryOptions,
) -> Result<ForecastSummary> {
    if ensemble.replicates.is_empty() {
        return Err(Error::Data("summary of an empty forecast ensemble".into()));
    }
    for &level in &opts.levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Parameter(format!("quantile level {level} outside (0, 1)")));
        }
    }
    let n_hist = ensemble.n_history_days;
    let horizon = ensemble.horizon;
    let n_regions = ctx.n_regions();
    let reps = &ensemble.replicates;
    let n_hosp = reps[0].census.len();
    for rep in reps {
        if rep.traj.n_days() != n_hist + horizon
            || rep.reported.n_regions() != n_regions
            || rep.reported.n_days() != horizon
            || rep.census.len() != n_hosp
        {
            return Err(Error::Data("forecast replicates have inconsistent shapes".into()));
        }
    }
    let n_show = opts.max_spaghetti.min(reps.len());

    let mut quantiles = Vec::new();
    let mut spaghetti = Vec::new();

    for r in 0..n_regions {
        let scope = ctx.graph.region_id(r);
        let population = ctx.graph.population(r) as f64;
        let collect = |f: &dyn Fn(&ForecastReplicate, usize) -> f64| -> Vec<Vec<f64>> {
            reps.iter()
                .map(|rep| (0..horizon).map(|h| f(rep, h)).collect())
                .collect()
        };
        let new_cases = collect(&|rep, h| rep.traj.y.get(r, n_hist + h) as f64);
        let reported = collect(&|rep, h| rep.reported.get(r, h) as f64);
        let raw_vax = collect(&|rep, h| rep.raw_vax.get(r, h) as f64);
        let weekly: Vec<Vec<f64>> = reps
            .iter()
            .map(|rep| seven_day_series(ctx, rep, r, n_hist, horizon, population))
            .collect();
        for (metric, series) in [
            (METRIC_NEW_CASES, &new_cases),
            (METRIC_REPORTED_CASES, &reported),
            (METRIC_CASES_7DAY_PER_100K, &weekly),
            (METRIC_RAW_VACCINATIONS, &raw_vax),
        ] {
            emit_metric(&mut quantiles, &mut spaghetti, &opts.levels, n_show, n_hist, scope, metric, series);
        }
    }

    for s in 0..n_hosp {
        let scope = reps[0].census[s].hospital_id.clone();
        let collect = |f: &dyn Fn(&HospitalCensus, usize) -> f64| -> Vec<Vec<f64>> {
            reps.iter()
                .map(|rep| (0..horizon).map(|h| f(&rep.census[s], h)).collect())
                .collect()
        };
        let floor = collect(&|c, h| c.floor[h] as f64);
        let icu = collect(&|c, h| c.icu[h] as f64);
        let admissions = collect(&|c, h| c.admissions[h] as f64);
        for (metric, series) in [
            (METRIC_FLOOR_CENSUS, &floor),
            (METRIC_ICU_CENSUS, &icu),
            (METRIC_ADMISSIONS, &admissions),
        ] {
            emit_metric(&mut quantiles, &mut spaghetti, &opts.levels, n_show, n_hist, &scope, metric, series);
        }
    }

    Ok(ForecastSummary { quantiles, spaghetti, convention: QUANTILE_CONVENTION })
}

/// Per-hospital daily probability that ICU census exceeds the given
/// fraction of its configured capacity.
///
/// # Errors
///
/// Empty ensemble, replicates without censuses, or a threshold outside
/// (0, 1].
pub fn icu_exceedance_by_hospital(
    ctx: &ModelContext,
    ensemble: &ForecastEnsemble,
    threshold: f64,
) -> Result<Vec<(String, Vec<f64>)>> {
    let n_hosp = ctx.hospital_configs.len();
    if ensemble.replicates.iter().any(|r| r.census.len() != n_hosp) {
        return Err(Error::Data("ensemble censuses disagree with the hospital configs".into()));
    }
    let mut out = Vec::with_capacity(n_hosp);
    for (s, config) in ctx.hospital_configs.iter().enumerate() {
        let reps: Vec<&HospitalCensus> = ensemble.replicates.iter().map(|r| &r.census[s]).collect();
        out.push((
            config.hospital_id.clone(),
            icu_exceedance(&reps, config.capacity.icu, threshold)?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shapes;
    use crate::hospital::Capacity;
    use crate::hospital::HospitalConfig;
    use crate::inference::params::Priors;
    use crate::inference::testutil::two_county_fixture;
    use crate::observation::SurveillanceData;
    use std::collections::BTreeMap;

    fn tree() -> SeedTree {
        SeedTree::new(2024)
    }

    // -- field extension core -----------------------------------------------

    #[test]
    fn extension_matches_reference_conditional_sampler() {
        let graph = shapes::path(3);
        let n_hist = 6;
        let horizon = 4;
        let total = n_hist + horizon;
        let rho_t = 0.6;
        let q_space = car_precision(&graph, 0.4, 2.0).unwrap();

        let mut history = Grid::zeros(3, n_hist);
        let mut history_mean = Grid::zeros(3, n_hist);
        for r in 0..3 {
            for t in 0..n_hist {
                history.set(r, t, ((r + 2 * t) as f64 * 0.31).sin());
                history_mean.set(r, t, 0.1 * r as f64);
            }
        }
        let ext = FieldExtension::build(&q_space, rho_t, &history, &history_mean, horizon).unwrap();
        let horizon_mean: Vec<f64> = (0..3)
            .flat_map(|r| (0..horizon).map(move |_| 0.1 * r as f64))
            .collect();
        let mut rng_a = tree().stream("ext", 0);
        let ours = ext.sample(&horizon_mean, &mut rng_a);

        // Same draw through the generic conditional sampler on the joint
        // precision: identical free-cell ordering, so identical output.
        let joint = kron_precision(&q_space, &ar1_precision(total, rho_t).unwrap()).unwrap();
        let mut mean_full = vec![0.0; 3 * total];
        let mut fixed_idx = Vec::new();
        let mut fixed_val = Vec::new();
        for r in 0..3 {
            for t in 0..total {
                mean_full[r * total + t] = 0.1 * r as f64;
            }
            for t in 0..n_hist {
                fixed_idx.push(r * total + t);
                fixed_val.push(history.get(r, t));
            }
        }
        let mut rng_b = tree().stream("ext", 0);
        let reference =
            crate::gmrf::conditional_sample(&joint, &mean_full, &fixed_idx, &fixed_val, &mut rng_b)
                .unwrap();
        for r in 0..3 {
            for h in 0..horizon {
                let a = ours[r * horizon + h];
                let b = reference[r * total + n_hist + h];
                assert!((a - b).abs() < 1e-9, "cell ({r}, {h}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn extension_variances_match_independent_case() {
        // rho_t = 0 decouples the horizon from the history and from itself,
        // so each cell's conditional variance is the prior marginal.
        let graph = shapes::path(2);
        let q_space = car_precision(&graph, 0.0, 4.0).unwrap(); // 4 I
        let history = Grid::zeros(2, 5);
        let ext = FieldExtension::build(&q_space, 0.0, &history, &history.clone(), 3).unwrap();
        for v in ext.marginal_variances() {
            assert!((v - 0.25).abs() < 1e-10, "variance {v}");
        }
    }

    // -- covariate process ---------------------------------------------------

    #[test]
    fn covariate_forecast_mean_matches_autoregressive_closed_form() {
        // Decoupled regions (spatial correlation zero), one series: the
        // conditional mean h days out is mean + rho^h (last - mean).
        let graph = shapes::path(2);
        let n_hist = 25;
        let horizon = 5;
        let mut hist = Grid::zeros(2, n_hist);
        for r in 0..2 {
            for t in 0..n_hist {
                hist.set(r, t, 1.5 + 0.8 * ((t as f64 * 0.7 + r as f64).sin()));
            }
        }
        let process = CovariateProcess {
            means: vec![vec![1.5, 1.5]],
            scales: vec![1.0],
            rho_s: 0.0,
            rho_t: 0.8,
            cross_corr: 0.0,
            tau: 900.0,
        };
        let ext = process.extension(&graph, &[&hist], horizon).unwrap();

        let n_draws = 400;
        let mut sums = vec![0.0; 2 * horizon];
        let mut rng = tree().stream("ar1", 0);
        for _ in 0..n_draws {
            let draw = ext.sample(&mut rng);
            for r in 0..2 {
                for h in 0..horizon {
                    sums[r * horizon + h] += draw[0].get(r, n_hist + h);
                }
            }
        }
        for r in 0..2 {
            let last = hist.get(r, n_hist - 1);
            for h in 0..horizon {
                let mc = sums[r * horizon + h] / n_draws as f64;
                let closed = 1.5 + 0.8f64.powi(h as i32 + 1) * (last - 1.5);
                assert!(
                    (mc - closed).abs() < 0.012,
                    "region {r} step {h}: {mc} vs {closed}"
                );
            }
        }
    }

    #[test]
    fn constant_history_continues_constant() {
        let graph = shapes::path(2);
        let a = Grid::filled(2, 12, 3.7);
        let b = Grid::filled(2, 12, -1.2);
        let process = CovariateProcess::fit(&graph, &[&a, &b]).unwrap();
        let ext = process.extension(&graph, &[&a, &b], 4).unwrap();
        let draw = ext.sample(&mut tree().stream("const", 0));
        assert_eq!(draw.len(), 2);
        assert_eq!(draw[0].n_days(), 16);
        for r in 0..2 {
            for t in 12..16 {
                assert!((draw[0].get(r, t) - 3.7).abs() < 1e-3);
                assert!((draw[1].get(r, t) + 1.2).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn zero_temporal_correlation_forgets_history() {
        let graph = shapes::path(2);
        let mut hist = Grid::filled(2, 10, 2.0);
        // A wild final observation must not move the forecast when the
        // temporal correlation is zero.
        hist.set(0, 9, 1.0e6);
        let process = CovariateProcess {
            means: vec![vec![2.0, 2.0]],
            scales: vec![1.0],
            rho_s: 0.0,
            rho_t: 0.0,
            cross_corr: 0.0,
            tau: 1.0e8,
        };
        let ext = process.extension(&graph, &[&hist], 3).unwrap();
        let draw = ext.sample(&mut tree().stream("nomem", 0));
        for r in 0..2 {
            for t in 10..13 {
                assert!((draw[0].get(r, t) - 2.0).abs() < 1e-3, "{}", draw[0].get(r, t));
            }
        }
    }

    #[test]
    fn fit_detects_strong_temporal_correlation() {
        let graph = shapes::path(2);
        let n_days = 300;
        let mut rng = tree().stream("fitgen", 0);
        let mut series = Grid::zeros(2, n_days);
        for r in 0..2 {
            let mut x = 0.0;
            for t in 0..n_days {
                x = 0.9 * x + rng.sample::<f64, _>(StandardNormal) * 0.3;
                series.set(r, t, 5.0 + x);
            }
        }
        let process = CovariateProcess::fit(&graph, &[&series]).unwrap();
        assert!(process.rho_t >= 0.6, "fitted rho_t = {}", process.rho_t);
        assert!(process.tau > 0.0);
    }

    #[test]
    fn covariate_extension_rejects_zero_horizon() {
        let graph = shapes::path(2);
        let a = Grid::filled(2, 6, 1.0);
        let process = CovariateProcess::fit(&graph, &[&a]).unwrap();
        assert!(process.extension(&graph, &[&a], 0).is_err());
    }

    #[test]
    fn exchangeable_precision_inverts_the_correlation() {
        // K = 2, corr 0.5: inverse of [[1, .5], [.5, 1]].
        let q = exchangeable_precision(2, 0.5, 1.0).unwrap();
        assert!((q.get(0, 0) - 4.0 / 3.0).abs() < 1e-12);
        assert!((q.get(0, 1) + 2.0 / 3.0).abs() < 1e-12);
        // Identity at zero correlation; scalar case collapses to the scale.
        let q = exchangeable_precision(3, 0.0, 2.5).unwrap();
        assert!((q.get(1, 1) - 2.5).abs() < 1e-12);
        assert_eq!(q.nnz_off_diagonal(), 0);
        let q = exchangeable_precision(1, 0.9, 7.0).unwrap();
        assert!((q.get(0, 0) - 7.0).abs() < 1e-12);

        // General case: Q * C = I.
        let k = 4;
        let corr = 0.3;
        let q = exchangeable_precision(k, corr, 1.0).unwrap().to_dense();
        let mut c = nalgebra::DMatrix::from_element(k, k, corr);
        for i in 0..k {
            c[(i, i)] = 1.0;
        }
        let prod = q * c;
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    // -- vaccination model ---------------------------------------------------

    #[test]
    fn ramp_schedule_interpolates_between_anchors() {
        let ramp = RampSchedule { ramp_start: 0, plateau_start: 72 };
        assert_eq!(ramp.value(-5), 0.0);
        assert_eq!(ramp.value(0), 0.0);
        assert!((ramp.value(36) - 0.5).abs() < 1e-12);
        assert_eq!(ramp.value(72), 1.0);
        assert_eq!(ramp.value(400), 1.0);
        assert!(RampSchedule { ramp_start: 5, plateau_start: 5 }.validate().is_err());
    }

    #[test]
    fn plateau_dose_forecast_mean_matches_rate() {
        let graph = shapes::path(2);
        let n_hist = 120;
        let horizon = 30;
        let ramp = RampSchedule { ramp_start: -100, plateau_start: -50 };
        let mut gen = tree().stream("doses", 0);
        let mut raw = Grid::<i64>::zeros(2, n_hist);
        for r in 0..2 {
            for t in 0..n_hist {
                raw.set(r, t, poisson_draw(50.0, &mut gen));
            }
        }
        let hypers = SpaceTimeHypers { tau: 25.0, rho_s: 0.3, rho_t: 0.9 };
        let model = VaccinationModel::fit(&raw, ramp, hypers).unwrap();
        let ext = model.extension(&graph, horizon).unwrap();

        let mut rng = tree().stream("dose-forecast", 0);
        let mut sum = 0i64;
        let mut count = 0usize;
        for _ in 0..60 {
            let fc = forecast_vaccinations(
                &model,
                &ext,
                &raw,
                &[0, 0],
                &[1_000_000_000, 1_000_000_000],
                0.8,
                14,
                &mut rng,
            )
            .unwrap();
            sum += fc.flat().iter().sum::<i64>();
            count += fc.flat().len();
        }
        let mean = sum as f64 / count as f64;
        assert!((mean - 50.0).abs() < 1.5, "forecast dose mean {mean}");
    }

    #[test]
    fn saturated_region_reports_no_doses() {
        let graph = shapes::path(2);
        let raw = Grid::<i64>::filled(2, 30, 40);
        let ramp = RampSchedule { ramp_start: -10, plateau_start: -5 };
        let hypers = SpaceTimeHypers { tau: 25.0, rho_s: 0.3, rho_t: 0.9 };
        let model = VaccinationModel::fit(&raw, ramp, hypers).unwrap();
        let ext = model.extension(&graph, 12).unwrap();
        let mut rng = tree().stream("sat", 0);

        // Region 0 enters at its ceiling, region 1 has headroom.
        let fc = forecast_vaccinations(&model, &ext, &raw, &[500, 0], &[500, 100_000], 0.8, 3, &mut rng)
            .unwrap();
        assert!(fc.row(0).iter().all(|&v| v == 0));
        assert!(fc.row(1).iter().sum::<i64>() > 0);
    }

    #[test]
    fn no_dose_history_forecasts_zero() {
        let graph = shapes::path(2);
        let raw = Grid::<i64>::zeros(2, 20);
        let model = VaccinationModel::fit(
            &raw,
            RampSchedule { ramp_start: -72, plateau_start: 0 },
            SpaceTimeHypers { tau: 25.0, rho_s: 0.3, rho_t: 0.9 },
        )
        .unwrap();
        let ext = model.extension(&graph, 8).unwrap();
        let mut rng = tree().stream("nodose", 0);
        let fc = forecast_vaccinations(&model, &ext, &raw, &[0, 0], &[50_000, 50_000], 0.8, 14, &mut rng)
            .unwrap();
        assert!(fc.flat().iter().all(|&v| v == 0));
    }

    #[test]
    fn saturation_prior_centers_on_target() {
        let prior = SaturationPrior::default();
        prior.validate().unwrap();
        assert!((prior.mean() - 0.60).abs() < 1e-12);
        let mut rng = tree().stream("satprior", 0);
        let n = 4000;
        let mut sum = 0.0;
        for _ in 0..n {
            let f = prior.draw(&mut rng);
            assert!((0.5..=0.75).contains(&f));
            sum += f;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.60).abs() < 0.02, "sample mean {mean}");
    }

    // -- posterior predictive -----------------------------------------------

    fn fixture_draws(n: usize) -> (ModelContext, Vec<ParameterSet>) {
        let (ctx, params, _) = two_county_fixture();
        let draws = (0..n)
            .map(|i| {
                let mut d = params.clone();
                d.transmission.mu = d.transmission.mu.map(|v| v + 0.01 * i as f64);
                d
            })
            .collect();
        (ctx, draws)
    }

    #[test]
    fn ensemble_covers_strided_draws_and_replicates() {
        let (ctx, draws) = fixture_draws(5);
        let mut cfg = ForecastConfig::new(6);
        cfg.replicates_per_draw = 2;
        cfg.draw_stride = 2;
        cfg.vax.ramp = RampSchedule { ramp_start: -30, plateau_start: -10 };
        let ens = posterior_predictive(&ctx, &draws, &cfg, &tree()).unwrap();

        assert_eq!(ens.n_history_days, 8);
        assert_eq!(ens.horizon, 6);
        assert_eq!(ens.replicates.len(), 6);
        let indices: Vec<usize> = ens.replicates.iter().map(|r| r.draw_index).collect();
        assert_eq!(indices, vec![0, 0, 2, 2, 4, 4]);

        for rep in &ens.replicates {
            assert_eq!(rep.traj.n_days(), 14);
            assert!(rep.admission_intensity.is_some());
            assert!(rep.census.is_empty());
            assert!(rep.covariates.is_empty());
            for r in 0..2 {
                // Every epidemic support constraint must survive the horizon.
                assert!(rep.traj.region_is_valid(r), "region {r} out of support");
                for h in 0..6 {
                    assert!(rep.reported.get(r, h) <= rep.traj.y.get(r, 8 + h));
                    assert!(rep.raw_vax.get(r, h) >= 0);
                }
                // Saturation ceiling holds over the whole window.
                let ceiling =
                    (rep.saturation_fraction * rep.traj.population(r) as f64).floor() as i64;
                let total_e: i64 = rep.traj.e.row(r).iter().sum();
                assert!(
                    total_e <= ceiling,
                    "region {r}: effective vaccinations {total_e} above ceiling {ceiling}"
                );
            }
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_ensemble() {
        let (ctx, draws) = fixture_draws(3);
        let mut cfg = ForecastConfig::new(5);
        cfg.replicates_per_draw = 2;
        let a = posterior_predictive(&ctx, &draws, &cfg, &SeedTree::new(7)).unwrap();
        let b = posterior_predictive(&ctx, &draws, &cfg, &SeedTree::new(7)).unwrap();
        assert_eq!(a.replicates.len(), b.replicates.len());
        for (x, y) in a.replicates.iter().zip(&b.replicates) {
            assert_eq!(x.saturation_fraction, y.saturation_fraction);
            assert_eq!(x.traj.y, y.traj.y);
            assert_eq!(x.traj.e, y.traj.e);
            assert_eq!(x.reported, y.reported);
            assert_eq!(x.raw_vax, y.raw_vax);
        }
        let c = posterior_predictive(&ctx, &draws, &cfg, &SeedTree::new(8)).unwrap();
        assert!(
            a.replicates.iter().zip(&c.replicates).any(|(x, y)| x.traj.y != y.traj.y),
            "different seeds should move the ensemble"
        );
    }

    #[test]
    fn no_transmission_keeps_case_paths_at_zero() {
        let graph = shapes::path(2);
        let n_days = 6;
        let mut reported = Grid::<i64>::zeros(2, n_days);
        reported.set(0, 0, 3);
        reported.set(1, 1, 2);
        let mut state_tests = BTreeMap::new();
        state_tests.insert("00".to_string(), vec![50i64; n_days]);
        let data = SurveillanceData {
            reported_cases: reported,
            state_tests,
            state_admissions: None,
            raw_vaccinations: Grid::zeros(2, n_days),
            flags: Vec::new(),
        };
        let ctx = ModelContext::from_data(graph, data).unwrap();
        let mut draw = ParameterSet::init(&ctx, &Priors::default()).unwrap();
        draw.transmission.mu = Grid::filled(2, n_days, -60.0);
        draw.transmission.phi = crate::inference::params::RegionEffect::constant(2, -60.0);
        draw.transmission.epsilon = Grid::zeros(2, n_days);
        draw.transmission.sigma2 = 1e-12;

        let cfg = ForecastConfig::new(10);
        let ens = posterior_predictive(&ctx, &[draw], &cfg, &tree()).unwrap();
        for rep in &ens.replicates {
            for r in 0..2 {
                for h in 0..10 {
                    assert_eq!(rep.traj.y.get(r, n_days + h), 0);
                    assert_eq!(rep.reported.get(r, h), 0);
                    assert_eq!(rep.raw_vax.get(r, h), 0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs_and_empty_draws() {
        let (ctx, draws) = fixture_draws(2);
        assert!(posterior_predictive(&ctx, &draws, &ForecastConfig::new(0), &tree()).is_err());
        assert!(posterior_predictive(&ctx, &[], &ForecastConfig::new(5), &tree()).is_err());
        let mut cfg = ForecastConfig::new(5);
        cfg.draw_stride = 0;
        assert!(posterior_predictive(&ctx, &draws, &cfg, &tree()).is_err());
    }

    fn hospital_fixture() -> (ModelContext, ParameterSet) {
        let (ctx0, _, _) = two_county_fixture();
        let hospital = HospitalConfig {
            hospital_id: "h1".to_string(),
            catchment: BTreeMap::from([("a".to_string(), 0.6), ("b".to_string(), 0.5)]),
            direct_icu_prob: 0.25,
            transition_probs: TransitionMatrix::from_exit_probs(0.08, 0.15, 0.1, 0.2).unwrap(),
            capacity: Capacity { floor: 40, icu: 12 },
            initial_floor: 4,
            initial_icu: 2,
        };
        let mut ctx = ModelContext::new(
            ctx0.graph.clone(),
            ctx0.data.clone(),
            Vec::new(),
            Vec::new(),
            vec![hospital],
            Vec::new(),
            ctx0.options.clone(),
        )
        .unwrap();
        ctx.options.vax_lag_days = 2;
        let params = ParameterSet::init(&ctx, &Priors::default()).unwrap();
        (ctx, params)
    }

    #[test]
    fn hospital_censuses_cover_the_horizon_and_conserve_patients() {
        let (ctx, params) = hospital_fixture();
        let mut cfg = ForecastConfig::new(5);
        cfg.replicates_per_draw = 3;
        let ens = posterior_predictive(&ctx, &[params], &cfg, &tree()).unwrap();
        assert_eq!(ens.replicates.len(), 3);
        for rep in &ens.replicates {
            assert_eq!(rep.census.len(), 1);
            let census = &rep.census[0];
            assert_eq!(census.n_days(), 5);
            assert!(census.conserves_patients(4, 2));
        }
        let exceed = icu_exceedance_by_hospital(&ctx, &ens, 0.9).unwrap();
        assert_eq!(exceed.len(), 1);
        assert_eq!(exceed[0].0, "h1");
        assert_eq!(exceed[0].1.len(), 5);
        assert!(exceed[0].1.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    // -- summaries ------------------------------------------------------------

    fn bare_context(n_days: usize, reported_per_day: i64) -> ModelContext {
        let graph = shapes::path(2);
        let reported = Grid::<i64>::filled(2, n_days, reported_per_day);
        let mut state_tests = BTreeMap::new();
        state_tests.insert("00".to_string(), vec![1000i64; n_days]);
        let data = SurveillanceData {
            reported_cases: reported,
            state_tests,
            state_admissions: None,
            raw_vaccinations: Grid::zeros(2, n_days),
            flags: Vec::new(),
        };
        ModelContext::from_data(graph, data).unwrap()
    }

    fn hand_ensemble(ctx: &ModelContext, horizon: usize, values: &[i64]) -> ForecastEnsemble {
        let n_hist = ctx.n_days();
        let replicates = values
            .iter()
            .map(|&v| {
                let mut traj = CompartmentTrajectory::empty(ctx.populations(), n_hist + horizon);
                let mut reported = Grid::<i64>::zeros(2, horizon);
                for r in 0..2 {
                    for h in 0..horizon {
                        traj.y.set(r, n_hist + h, v);
                        reported.set(r, h, v);
                    }
                }
                ForecastReplicate {
                    draw_index: 0,
                    saturation_fraction: 0.6,
                    traj,
                    reported,
                    raw_vax: Grid::zeros(2, horizon),
                    covariates: Vec::new(),
                    admission_intensity: None,
                    census: Vec::new(),
                }
            })
            .collect();
        ForecastEnsemble { n_history_days: n_hist, horizon, replicates }
    }

    #[test]
    fn quantiles_follow_the_rank_interpolation_convention() {
        let ctx = bare_context(3, 0);
        let values: Vec<i64> = (1..=100).collect();
        let ens = hand_ensemble(&ctx, 2, &values);
        let summary = summarize(
            &ctx,
            &ens,
            &SummaryOptions { levels: vec![0.25, 0.5, 0.75], max_spaghetti: 3 },
        )
        .unwrap();

        let day = ens.n_history_days;
        let pick = |level: f64| -> f64 {
            summary
                .quantiles
                .iter()
                .find(|row| {
                    row.scope == "r000"
                        && row.metric == METRIC_NEW_CASES
                        && row.day == day
                        && row.level == level
                })
                .expect("row present")
                .value
        };
        assert!((pick(0.25) - 25.75).abs() < 1e-9);
        assert!((pick(0.5) - 50.5).abs() < 1e-9);
        assert!((pick(0.75) - 75.25).abs() < 1e-9);
        assert_eq!(summary.convention, QUANTILE_CONVENTION);
        // Spaghetti capped at the requested path count.
        let shown: std::collections::BTreeSet<usize> =
            summary.spaghetti.iter().map(|row| row.replicate).collect();
        assert_eq!(shown.len(), 3);
    }

    #[test]
    fn identical_replicates_collapse_every_quantile() {
        let ctx = bare_context(3, 0);
        let ens = hand_ensemble(&ctx, 2, &[7; 5]);
        let summary = summarize(&ctx, &ens, &SummaryOptions::default()).unwrap();
        for row in summary
            .quantiles
            .iter()
            .filter(|r| r.metric == METRIC_NEW_CASES || r.metric == METRIC_REPORTED_CASES)
        {
            assert!((row.value - 7.0).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn quantiles_are_monotone_in_level() {
        let ctx = bare_context(4, 2);
        let values: Vec<i64> = (0..37).map(|i| (i * 13 + 5) % 50).collect();
        let ens = hand_ensemble(&ctx, 3, &values);
        let summary = summarize(&ctx, &ens, &SummaryOptions::default()).unwrap();
        // Rows come out level-ordered within each (scope, metric, day).
        let mut prev: Option<(&str, &str, usize, f64)> = None;
        for row in &summary.quantiles {
            if let Some((scope, metric, day, value)) = prev {
                if scope == row.scope && metric == row.metric && day == row.day {
                    assert!(row.value >= value - 1e-12, "{row:?} after {value}");
                }
            }
            prev = Some((&row.scope, &row.metric, row.day, row.value));
        }
    }

    #[test]
    fn weekly_average_of_constant_series_is_exact() {
        // 14 reported cases every day in a county of 100k: the trailing
        // 7-day average per 100k is exactly 14.
        let ctx = bare_context(10, 14);
        let ens = hand_ensemble(&ctx, 5, &[14; 4]);
        let summary = summarize(&ctx, &ens, &SummaryOptions::default()).unwrap();
        let rows: Vec<_> = summary
            .quantiles
            .iter()
            .filter(|r| r.metric == METRIC_CASES_7DAY_PER_100K)
            .collect();
        assert!(!rows.is_empty());
        for row in rows {
            assert!((row.value - 14.0).abs() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn summarize_rejects_bad_levels_and_empty_ensembles() {
        let ctx = bare_context(3, 0);
        let ens = hand_ensemble(&ctx, 2, &[1, 2, 3]);
        for bad in [0.0, 1.0, -0.2, 1.7] {
            let opts = SummaryOptions { levels: vec![bad], max_spaghetti: 1 };
            assert!(summarize(&ctx, &ens, &opts).is_err(), "level {bad} accepted");
        }
        let empty = ForecastEnsemble { n_history_days: 3, horizon: 2, replicates: Vec::new() };
        assert!(summarize(&ctx, &empty, &SummaryOptions::default()).is_err());
    }
}
