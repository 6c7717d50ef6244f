//! Precision structures and derived-quantity caches shared by the update
//! kernels. Structures change only when a correlation parameter moves; the
//! workspace tracks cheap transforms of the current state.

use crate::error::Result;
use crate::graph::CountyGraph;
use crate::grid::Grid;
use crate::observation::log_test_rate;
use crate::precision::{ar1_precision, car_precision, kron_precision, SparsePrecision};
use crate::stats::inv_logit;

use super::context::ModelContext;
use super::params::ParameterSet;

const LN_2PI: f64 = 1.837877066409345;

/// Separable space-time precision at unit scale: `Qs (x) Qt` with the CAR
/// spatial factor and unit-variance AR(1) temporal factor. The field's
/// precision scale multiplies the whole product, so log determinants and
/// quadratic forms are cached at unit scale and scaled on use.
///
/// Cells are region-major: `(region, day)` sits at `region * n_days + day`,
/// matching [`Grid`]'s flat layout.
pub struct SpaceTimeStructure {
    pub qs: SparsePrecision,
    pub qt: SparsePrecision,
    pub kron: SparsePrecision,
    pub qs_logdet: f64,
    pub qt_logdet: f64,
    /// Row sums of Qs (symmetric, so also column sums).
    pub qs_colsum: Vec<f64>,
    /// Row sums of Qt.
    pub qt_colsum: Vec<f64>,
    pub qs_sum: f64,
    pub qt_sum: f64,
}

fn row_sums(q: &SparsePrecision) -> Vec<f64> {
    (0..q.dim())
        .map(|i| q.row_entries(i).map(|(_, v)| v).sum())
        .collect()
}

impl SpaceTimeStructure {
    /// Builds both factors and their Kronecker product. The factors are
    /// Cholesky-factored here (they are small); the product never is.
    pub fn build(graph: &CountyGraph, n_days: usize, rho_s: f64, rho_t: f64) -> Result<Self> {
        let qs = car_precision(graph, rho_s, 1.0)?;
        let qt = ar1_precision(n_days, rho_t)?;
        let qs_logdet = qs.log_det()?;
        let qt_logdet = qt.log_det()?;
        let kron = kron_precision(&qs, &qt)?;
        let qs_colsum = row_sums(&qs);
        let qt_colsum = row_sums(&qt);
        Ok(SpaceTimeStructure {
            qs_sum: qs_colsum.iter().sum(),
            qt_sum: qt_colsum.iter().sum(),
            qs,
            qt,
            kron,
            qs_logdet,
            qt_logdet,
            qs_colsum,
            qt_colsum,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.qs.dim()
    }

    pub fn n_days(&self) -> usize {
        self.qt.dim()
    }

    /// `(x - mean)' (Qs (x) Qt) (x - mean)` at unit scale.
    pub fn quadform(&self, x: &[f64], mean: &[f64]) -> f64 {
        self.kron.quadform(x, mean)
    }

    /// Log density of `N(mean, (tau Qs (x) Qt)^{-1})` at `x`.
    pub fn log_density(&self, x: &[f64], mean: &[f64], tau: f64) -> f64 {
        let n = self.kron.dim() as f64;
        let logdet = n * tau.ln()
            + self.n_days() as f64 * self.qs_logdet
            + self.n_regions() as f64 * self.qt_logdet;
        0.5 * logdet - 0.5 * n * LN_2PI - 0.5 * tau * self.quadform(x, mean)
    }
}

/// Regional CAR precision at unit scale, for intercept and slope fields
/// whose mean is a scalar parent.
pub struct RegionStructure {
    pub q: SparsePrecision,
    pub logdet: f64,
    /// Row sums of Q; `colsum . x` is `1' Q x`.
    pub colsum: Vec<f64>,
    /// `1' Q 1`, the precision multiplier of the parent-mean conditional.
    pub sum: f64,
}

impl RegionStructure {
    pub fn build(graph: &CountyGraph, rho: f64) -> Result<Self> {
        let q = car_precision(graph, rho, 1.0)?;
        let logdet = q.log_det()?;
        let colsum = row_sums(&q);
        Ok(RegionStructure { sum: colsum.iter().sum(), q, logdet, colsum })
    }

    /// Log density of `N(parent_mean 1, (tau Q)^{-1})` at `x`.
    pub fn log_density(&self, x: &[f64], parent_mean: f64, tau: f64) -> f64 {
        let n = self.q.dim() as f64;
        let mean = vec![parent_mean; self.q.dim()];
        0.5 * (n * tau.ln() + self.logdet)
            - 0.5 * n * LN_2PI
            - 0.5 * tau * self.q.quadform(x, &mean)
    }

    pub fn quadform_about(&self, x: &[f64], parent_mean: f64) -> f64 {
        let mean = vec![parent_mean; self.q.dim()];
        self.q.quadform(x, &mean)
    }
}

/// Structures of the admission model: the space-time field and its regional
/// intercept.
pub struct AdmissionStructures {
    pub field: SpaceTimeStructure,
    pub phi: RegionStructure,
}

/// Every precision structure of the current state, rebuilt when the
/// corresponding correlation parameter changes.
pub struct Structures {
    pub mu: SpaceTimeStructure,
    pub phi: RegionStructure,
    pub alphas: Vec<RegionStructure>,
    pub tests: SpaceTimeStructure,
    pub adm: Option<AdmissionStructures>,
}

impl Structures {
    pub fn build(ctx: &ModelContext, params: &ParameterSet) -> Result<Structures> {
        let n_days = ctx.n_days();
        let mu = SpaceTimeStructure::build(
            &ctx.graph,
            n_days,
            params.transmission.hypers.rho_s,
            params.transmission.hypers.rho_t,
        )?;
        let phi = RegionStructure::build(&ctx.graph, params.transmission.phi.hypers.rho)?;
        let alphas = params
            .transmission
            .alphas
            .iter()
            .map(|a| RegionStructure::build(&ctx.graph, a.hypers.rho))
            .collect::<Result<Vec<_>>>()?;
        let tests = SpaceTimeStructure::build(
            &ctx.graph,
            n_days,
            params.tests.hypers.rho_s,
            params.tests.hypers.rho_t,
        )?;
        let adm = match &params.admissions {
            Some(a) => Some(AdmissionStructures {
                field: SpaceTimeStructure::build(&ctx.graph, n_days, a.hypers.rho_s, a.hypers.rho_t)?,
                phi: RegionStructure::build(&ctx.graph, a.phi.hypers.rho)?,
            }),
            None => None,
        };
        Ok(Structures { mu, phi, alphas, tests, adm })
    }
}

/// Cheap per-cell transforms of the current state, kept in lockstep with it
/// by the update kernels.
pub struct Workspace {
    /// `exp(mu + epsilon) / N`: the infection rate at `(r, t)` is
    /// `I_{t-1} S_{t-1} inf_factor[r, t]`.
    pub inf_factor: Grid<f64>,
    /// Mean surface of the transmission field:
    /// `phi_r + sum_k z_k alpha_k[r] + sum_j x_j beta_j`.
    pub mu_mean: Grid<f64>,
    /// Log tests per hundred thousand, the detection covariate.
    pub lograte: Grid<f64>,
    /// Detection probability per cell.
    pub pi: Grid<f64>,
    /// Mean surface of the admission field (regional intercept broadcast);
    /// zeros when the admission model is off.
    pub omega_mean: Grid<f64>,
    /// `exp(omega)`: the admission rate at `(r, t)` is
    /// `I_t adm_factor[r, t]`. Ones when the admission model is off.
    pub adm_factor: Grid<f64>,
}

impl Workspace {
    pub fn new(ctx: &ModelContext, params: &ParameterSet) -> Workspace {
        let n = ctx.n_regions();
        let t = ctx.n_days();
        let mut ws = Workspace {
            inf_factor: Grid::zeros(n, t),
            mu_mean: Grid::zeros(n, t),
            lograte: Grid::zeros(n, t),
            pi: Grid::zeros(n, t),
            omega_mean: Grid::zeros(n, t),
            adm_factor: Grid::filled(n, t, 1.0),
        };
        ws.refresh_all(ctx, params);
        ws
    }

    pub fn refresh_all(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        self.refresh_mu_mean(ctx, params);
        self.refresh_inf_factor(ctx, params);
        self.refresh_lograte(ctx, params);
        self.refresh_pi(ctx, params);
        self.refresh_admissions(ctx, params);
    }

    pub fn refresh_mu_mean(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        let tr = &params.transmission;
        for r in 0..ctx.n_regions() {
            for t in 0..ctx.n_days() {
                let mut m = tr.phi.values[r];
                for (k, cov) in ctx.random_covariates.iter().enumerate() {
                    m += cov.values.get(r, t) * tr.alphas[k].values[r];
                }
                for (j, cov) in ctx.fixed_covariates.iter().enumerate() {
                    m += cov.values.get(r, t) * tr.betas[j];
                }
                self.mu_mean.set(r, t, m);
            }
        }
    }

    pub fn refresh_inf_factor(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        let tr = &params.transmission;
        for r in 0..ctx.n_regions() {
            let pop = ctx.graph.population(r) as f64;
            for t in 0..ctx.n_days() {
                let b = (tr.mu.get(r, t) + tr.epsilon.get(r, t)).exp();
                self.inf_factor.set(r, t, b / pop);
            }
        }
    }

    pub fn refresh_lograte(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        for r in 0..ctx.n_regions() {
            let pop = ctx.graph.population(r) as i64;
            for t in 0..ctx.n_days() {
                self.lograte.set(r, t, log_test_rate(params.tests.counts.get(r, t), pop));
            }
        }
    }

    pub fn refresh_pi(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        let det = &params.detection;
        for r in 0..ctx.n_regions() {
            for t in 0..ctx.n_days() {
                let logit_pi =
                    det.intercept + det.slope * self.lograte.get(r, t) + det.noise.get(r, t);
                self.pi.set(r, t, inv_logit(logit_pi));
            }
        }
    }

    /// Recomputes the detection cache for one cell after a local change to
    /// the noise or the test count.
    pub fn refresh_pi_cell(&mut self, params: &ParameterSet, r: usize, t: usize) {
        let det = &params.detection;
        let logit_pi = det.intercept + det.slope * self.lograte.get(r, t) + det.noise.get(r, t);
        self.pi.set(r, t, inv_logit(logit_pi));
    }

    /// Recomputes lograte and pi for one cell after a test-count change.
    pub fn refresh_tests_cell(
        &mut self,
        ctx: &ModelContext,
        params: &ParameterSet,
        r: usize,
        t: usize,
    ) {
        let pop = ctx.graph.population(r) as i64;
        self.lograte.set(r, t, log_test_rate(params.tests.counts.get(r, t), pop));
        self.refresh_pi_cell(params, r, t);
    }

    pub fn refresh_admissions(&mut self, ctx: &ModelContext, params: &ParameterSet) {
        let Some(adm) = &params.admissions else {
            return;
        };
        for r in 0..ctx.n_regions() {
            for t in 0..ctx.n_days() {
                self.omega_mean.set(r, t, adm.phi.values[r]);
                self.adm_factor.set(r, t, adm.omega.get(r, t).exp());
            }
        }
    }

    pub fn refresh_inf_cell(&mut self, ctx: &ModelContext, params: &ParameterSet, r: usize, t: usize) {
        let tr = &params.transmission;
        let pop = ctx.graph.population(r) as f64;
        let b = (tr.mu.get(r, t) + tr.epsilon.get(r, t)).exp();
        self.inf_factor.set(r, t, b / pop);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shapes;

    fn toy() -> CountyGraph {
        shapes::path(4)
    }

    #[test]
    fn space_time_log_density_matches_direct_evaluation() {
        let graph = toy();
        let st = SpaceTimeStructure::build(&graph, 3, 0.4, 0.6).unwrap();
        let tau = 2.5;
        // Direct: scale the Kronecker product by tau and use the generic
        // density evaluator.
        let scaled = kron_precision(
            &car_precision(&graph, 0.4, tau).unwrap(),
            &ar1_precision(3, 0.6).unwrap(),
        )
        .unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mean = vec![0.2; 12];
        let direct = crate::gmrf::log_density(&x, &mean, &scaled).unwrap();
        let cached = st.log_density(&x, &mean, tau);
        assert!((direct - cached).abs() < 1e-9, "{direct} vs {cached}");
    }

    #[test]
    fn region_log_density_matches_direct_evaluation() {
        let graph = toy();
        let rs = RegionStructure::build(&graph, 0.3).unwrap();
        let tau = 1.7;
        let scaled = car_precision(&graph, 0.3, tau).unwrap();
        let x = vec![0.1, -0.4, 0.7, 0.2];
        let mean = vec![0.05; 4];
        let direct = crate::gmrf::log_density(&x, &mean, &scaled).unwrap();
        let cached = rs.log_density(&x, 0.05, tau);
        assert!((direct - cached).abs() < 1e-9);
    }

    #[test]
    fn colsums_match_ones_quadform() {
        let graph = toy();
        let st = SpaceTimeStructure::build(&graph, 5, 0.5, 0.2).unwrap();
        let ones = vec![1.0; 20];
        let direct = st.kron.quadform(&ones, &[]);
        assert!((direct - st.qs_sum * st.qt_sum).abs() < 1e-9);
    }
}
