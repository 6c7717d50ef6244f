//! Exact Gibbs draws of the Gaussian layer: regional intercepts and slopes,
//! scalar fixed effects, parent means, and the test-volume level. All of
//! them condition on a space-time field whose precision is a Kronecker
//! product, which collapses the normal-equation blocks to small dense
//! matrices:
//!
//! * intercept field (design I_R (x) 1_T):  M' (Qs (x) Qt) M = (1' Qt 1) Qs
//! * slope field (design diag of z rows):   blocks qs[i, j] (z_i' Qt z_j)
//! * scalar column x:                       x' (Qs (x) Qt) x
//!
//! so each draw is one small Cholesky plus sparse row scans.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::Grid;
use crate::precision::CholeskyFactor;

use super::context::ModelContext;
use super::params::{ParameterSet, Priors};
use super::structures::{RegionStructure, SpaceTimeStructure, Structures, Workspace};

/// Draws from N(P^{-1} b, P^{-1}) given the dense conditional precision P
/// and linear term b.
fn draw_gaussian(p: DMatrix<f64>, b: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let factor = CholeskyFactor::of_dense(p).expect("conditional precision positive definite");
    let mean = factor.solve(b);
    let z: Vec<f64> = (0..b.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = factor.solve_lt(&z);
    mean.iter().zip(&noise).map(|(m, n)| m + n).collect()
}

/// Conditional precision and linear term of a regional intercept field
/// given its space-time field. `resid` must hold field minus every mean
/// component except the intercept's own contribution.
fn intercept_conditional(
    st: &SpaceTimeStructure,
    rs: &RegionStructure,
    field_tau: f64,
    own_tau: f64,
    parent_mean: f64,
    resid: &Grid<f64>,
) -> (DMatrix<f64>, Vec<f64>) {
    let n = st.n_regions();
    let t = st.n_days();
    // v_j = qt_colsum . resid_j
    let v: Vec<f64> = (0..n)
        .map(|j| {
            resid
                .row(j)
                .iter()
                .zip(&st.qt_colsum)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    debug_assert_eq!(resid.n_days(), t);

    let mut p = DMatrix::zeros(n, n);
    let mut b = vec![0.0; n];
    for i in 0..n {
        for (j, q) in st.qs.row_entries(i) {
            p[(i, j)] += field_tau * st.qt_sum * q;
            b[i] += field_tau * q * v[j];
        }
        for (j, q) in rs.q.row_entries(i) {
            p[(i, j)] += own_tau * q;
        }
        b[i] += own_tau * parent_mean * rs.colsum[i];
    }
    (p, b)
}

/// Conditional precision and linear term of a regional slope field with
/// per-cell design `z`, given the space-time field. `resid` excludes the
/// slope's own contribution.
fn slope_conditional(
    st: &SpaceTimeStructure,
    rs: &RegionStructure,
    field_tau: f64,
    own_tau: f64,
    parent_mean: f64,
    z: &Grid<f64>,
    resid: &Grid<f64>,
) -> (DMatrix<f64>, Vec<f64>) {
    let n = st.n_regions();
    // u_j = Qt z_j and w_j = Qt resid_j, per region.
    let u: Vec<Vec<f64>> = (0..n).map(|j| st.qt.matvec(z.row(j))).collect();
    let w: Vec<Vec<f64>> = (0..n).map(|j| st.qt.matvec(resid.row(j))).collect();

    let mut p = DMatrix::zeros(n, n);
    let mut b = vec![0.0; n];
    for i in 0..n {
        for (j, q) in st.qs.row_entries(i) {
            let zi = z.row(i);
            let cross: f64 = zi.iter().zip(&u[j]).map(|(a, c)| a * c).sum();
            p[(i, j)] += field_tau * q * cross;
            let lin: f64 = zi.iter().zip(&w[j]).map(|(a, c)| a * c).sum();
            b[i] += field_tau * q * lin;
        }
        for (j, q) in rs.q.row_entries(i) {
            p[(i, j)] += own_tau * q;
        }
        b[i] += own_tau * parent_mean * rs.colsum[i];
    }
    (p, b)
}

/// Transmission-field residual with the given components removed. `skip`
/// selects which mean component to exclude: the intercept, one slope, or
/// one fixed effect.
enum Exclude {
    Intercept,
    Slope(usize),
    Fixed(usize),
}

fn transmission_resid(ctx: &ModelContext, params: &ParameterSet, skip: Exclude) -> Grid<f64> {
    let tr = &params.transmission;
    let n = ctx.n_regions();
    let t = ctx.n_days();
    let mut resid = Grid::zeros(n, t);
    for r in 0..n {
        for d in 0..t {
            let mut m = 0.0;
            if !matches!(skip, Exclude::Intercept) {
                m += tr.phi.values[r];
            }
            for (k, cov) in ctx.random_covariates.iter().enumerate() {
                if matches!(skip, Exclude::Slope(s) if s == k) {
                    continue;
                }
                m += cov.values.get(r, d) * tr.alphas[k].values[r];
            }
            for (j, cov) in ctx.fixed_covariates.iter().enumerate() {
                if matches!(skip, Exclude::Fixed(f) if f == j) {
                    continue;
                }
                m += cov.values.get(r, d) * tr.betas[j];
            }
            resid.set(r, d, tr.mu.get(r, d) - m);
        }
    }
    resid
}

pub fn update_phi(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    rng: &mut ChaCha8Rng,
) {
    let resid = transmission_resid(ctx, params, Exclude::Intercept);
    let tr = &params.transmission;
    let (p, b) = intercept_conditional(
        &structures.mu,
        &structures.phi,
        tr.hypers.tau,
        tr.phi.hypers.tau,
        tr.phi.hypers.parent_mean,
        &resid,
    );
    params.transmission.phi.values = draw_gaussian(p, &b, rng);
    ws.refresh_mu_mean(ctx, params);
}

pub fn update_alpha(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    let resid = transmission_resid(ctx, params, Exclude::Slope(k));
    let tr = &params.transmission;
    let (p, b) = slope_conditional(
        &structures.mu,
        &structures.alphas[k],
        tr.hypers.tau,
        tr.alphas[k].hypers.tau,
        tr.alphas[k].hypers.parent_mean,
        &ctx.random_covariates[k].values,
        &resid,
    );
    params.transmission.alphas[k].values = draw_gaussian(p, &b, rng);
    ws.refresh_mu_mean(ctx, params);
}

pub fn update_beta(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    priors: &Priors,
    j: usize,
    rng: &mut ChaCha8Rng,
) {
    let resid = transmission_resid(ctx, params, Exclude::Fixed(j));
    let x = &ctx.fixed_covariates[j].values;
    let tau = params.transmission.hypers.tau;
    let qx = structures.mu.kron.matvec(x.flat());
    let xqx: f64 = x.flat().iter().zip(&qx).map(|(a, b)| a * b).sum();
    let xqr: f64 = resid.flat().iter().zip(&qx).map(|(a, b)| a * b).sum();
    let p = tau * xqx + priors.beta_sd.powi(-2);
    let mean = tau * xqr / p;
    let z: f64 = rng.sample(StandardNormal);
    params.transmission.betas[j] = mean + z / p.sqrt();
    ws.refresh_mu_mean(ctx, params);
}

/// Scalar parent-mean draw for a regional field: the field is
/// N(mean 1, (tau Q)^{-1}) and the parent carries a N(0, sd^2) prior.
fn parent_mean_draw(
    rs: &RegionStructure,
    tau: f64,
    values: &[f64],
    prior_sd: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let p = tau * rs.sum + prior_sd.powi(-2);
    let b = tau * rs.colsum.iter().zip(values).map(|(c, v)| c * v).sum::<f64>();
    let z: f64 = rng.sample(StandardNormal);
    b / p + z / p.sqrt()
}

pub fn update_parent_means(
    params: &mut ParameterSet,
    structures: &Structures,
    priors: &Priors,
    rng: &mut ChaCha8Rng,
) {
    let tr = &mut params.transmission;
    tr.phi.hypers.parent_mean = parent_mean_draw(
        &structures.phi,
        tr.phi.hypers.tau,
        &tr.phi.values,
        priors.parent_mean_sd,
        rng,
    );
    for (k, alpha) in tr.alphas.iter_mut().enumerate() {
        alpha.hypers.parent_mean = parent_mean_draw(
            &structures.alphas[k],
            alpha.hypers.tau,
            &alpha.values,
            priors.parent_mean_sd,
            rng,
        );
    }
    if let (Some(adm), Some(st)) = (params.admissions.as_mut(), structures.adm.as_ref()) {
        adm.phi.hypers.parent_mean = parent_mean_draw(
            &st.phi,
            adm.phi.hypers.tau,
            &adm.phi.values,
            priors.parent_mean_sd,
            rng,
        );
    }
}

/// Gibbs draw of the scalar test-volume level: the field is
/// N(mean 1, (tau Qs (x) Qt)^{-1}); 1' (Qs (x) Qt) 1 and 1' (Qs (x) Qt) f
/// reduce to column-sum contractions.
pub fn update_tests_mean(
    params: &mut ParameterSet,
    structures: &Structures,
    priors: &Priors,
    rng: &mut ChaCha8Rng,
) {
    let st = &structures.tests;
    let tau = params.tests.hypers.tau;
    let n = st.n_regions();
    let quad_ones = st.qs_sum * st.qt_sum;
    let mut lin = 0.0;
    for j in 0..n {
        let dot: f64 = params
            .tests
            .field
            .row(j)
            .iter()
            .zip(&st.qt_colsum)
            .map(|(a, b)| a * b)
            .sum();
        lin += st.qs_colsum[j] * dot;
    }
    let p = tau * quad_ones + priors.parent_mean_sd.powi(-2);
    let b = tau * lin;
    let z: f64 = rng.sample(StandardNormal);
    params.tests.mean = b / p + z / p.sqrt();
}

pub fn update_omega_phi(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    rng: &mut ChaCha8Rng,
) {
    let (Some(adm), Some(st)) = (params.admissions.as_mut(), structures.adm.as_ref()) else {
        return;
    };
    let (p, b) = intercept_conditional(
        &st.field,
        &st.phi,
        adm.hypers.tau,
        adm.phi.hypers.tau,
        adm.phi.hypers.parent_mean,
        &adm.omega,
    );
    adm.phi.values = draw_gaussian(p, &b, rng);
    for r in 0..ctx.n_regions() {
        for t in 0..ctx.n_days() {
            ws.omega_mean.set(r, t, adm.phi.values[r]);
        }
    }
}

/// Full Gaussian-layer pass in a fixed order.
pub fn gaussian_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    priors: &Priors,
    rng: &mut ChaCha8Rng,
) {
    update_phi(ctx, params, ws, structures, rng);
    for k in 0..params.transmission.alphas.len() {
        update_alpha(ctx, params, ws, structures, k, rng);
    }
    for j in 0..params.transmission.betas.len() {
        update_beta(ctx, params, ws, structures, priors, j, rng);
    }
    update_omega_phi(ctx, params, ws, structures, rng);
    update_parent_means(params, structures, priors, rng);
    update_tests_mean(params, structures, priors, rng);
}
