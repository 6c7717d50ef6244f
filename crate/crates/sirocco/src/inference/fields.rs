//! Preconditioned Crank-Nicolson block updates of the space-time fields.
//! Each block is one region's cells over a short day window. The proposal
//! recenters on the prior conditional mean given everything outside the
//! block, so the acceptance ratio reduces to the likelihood terms the block
//! touches:
//!
//!   x' = m_cond + sqrt(1 - s^2) (x - m_cond) + s L^{-T} z / sqrt(tau)
//!
//! with `L` the Cholesky factor of the block's unit-scale prior precision.
//! The conditional mean needs no extra solve beyond the block:
//! m_cond = x_B - Q_BB^{-1} [Q (x - m)]_B.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::epi::infection_ln_pmf;
use crate::hospital::admission_ln_pmf;
use crate::precision::CholeskyFactor;

use super::context::ModelContext;
use super::params::ParameterSet;
use super::structures::{SpaceTimeStructure, Structures, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Transmission,
    TestVolume,
    Admission,
}

/// Prior mean of the field at one cell.
fn mean_at(
    kind: FieldKind,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    t: usize,
) -> f64 {
    match kind {
        FieldKind::Transmission => ws.mu_mean.get(r, t),
        FieldKind::TestVolume => params.tests.mean,
        FieldKind::Admission => ws.omega_mean.get(r, t),
    }
}

fn field_value(kind: FieldKind, params: &ParameterSet, r: usize, t: usize) -> f64 {
    match kind {
        FieldKind::Transmission => params.transmission.mu.get(r, t),
        FieldKind::TestVolume => params.tests.field.get(r, t),
        FieldKind::Admission => params.admissions.as_ref().unwrap().omega.get(r, t),
    }
}

fn set_field_value(kind: FieldKind, params: &mut ParameterSet, r: usize, t: usize, v: f64) {
    match kind {
        FieldKind::Transmission => params.transmission.mu.set(r, t, v),
        FieldKind::TestVolume => params.tests.field.set(r, t, v),
        FieldKind::Admission => params.admissions.as_mut().unwrap().omega.set(r, t, v),
    }
}

/// Likelihood terms that involve the field's values in the given window of
/// one region, read from the current parameter state. Constant factors that
/// cancel in a same-window comparison are dropped.
fn window_loglik(
    kind: FieldKind,
    ctx: &ModelContext,
    params: &ParameterSet,
    r: usize,
    window: std::ops::Range<usize>,
) -> f64 {
    let mut lp = 0.0;
    match kind {
        FieldKind::Transmission => {
            let Some(t0) = ctx.start_days[r] else { return 0.0 };
            let pop = ctx.graph.population(r) as f64;
            let traj = &params.traj;
            let tr = &params.transmission;
            for t in window {
                if t <= t0 {
                    continue;
                }
                let s_prev = traj.susceptible(r, t - 1);
                let rate = traj.infected.get(r, t - 1) as f64
                    * s_prev as f64
                    * (tr.mu.get(r, t) + tr.epsilon.get(r, t)).exp()
                    / pop;
                lp += infection_ln_pmf(traj.y.get(r, t), rate, s_prev);
            }
        }
        FieldKind::TestVolume => {
            for t in window {
                let f = params.tests.field.get(r, t);
                lp += params.tests.counts.get(r, t) as f64 * f - f.exp();
            }
        }
        FieldKind::Admission => {
            let adm = params.admissions.as_ref().unwrap();
            for t in window {
                let infected = params.traj.infected.get(r, t);
                let rate = infected as f64 * adm.omega.get(r, t).exp();
                lp += admission_ln_pmf(adm.counts.get(r, t), rate, infected);
            }
        }
    }
    lp
}

/// One block move. Returns whether it accepted (a failed block
/// factorization counts as a rejection).
#[allow(clippy::too_many_arguments)]
fn update_block(
    kind: FieldKind,
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    st: &SpaceTimeStructure,
    tau: f64,
    r: usize,
    window: std::ops::Range<usize>,
    scale: f64,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> bool {
    let n_days = ctx.n_days();
    let w = window.len();
    let idx: Vec<usize> = window.clone().map(|t| r * n_days + t).collect();

    // u = [Q (x - m)]_B at unit scale.
    let mut u = vec![0.0; w];
    for (a, &i) in idx.iter().enumerate() {
        let mut acc = 0.0;
        for (j, q) in st.kron.row_entries(i) {
            let (rj, tj) = (j / n_days, j % n_days);
            acc += q * (field_value(kind, params, rj, tj) - mean_at(kind, params, ws, rj, tj));
        }
        u[a] = acc;
    }

    let qb = st.kron.dense_block(&idx);
    let Some(factor) = CholeskyFactor::of_dense(qb) else {
        return false;
    };
    let correction = factor.solve(&u);
    let x_b: Vec<f64> = window.clone().map(|t| field_value(kind, params, r, t)).collect();
    let z: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
    let noise = factor.solve_lt(&z);
    let damp = (1.0 - scale * scale).max(0.0).sqrt();
    let root_tau = tau.sqrt();
    // m_cond = x_B - correction, so x' = x - (1 - damp) correction + noise.
    let proposed: Vec<f64> = (0..w)
        .map(|a| x_b[a] - (1.0 - damp) * correction[a] + scale * noise[a] / root_tau)
        .collect();

    let old_ll = if prior_only {
        0.0
    } else {
        window_loglik(kind, ctx, params, r, window.clone())
    };
    for (a, t) in window.clone().enumerate() {
        set_field_value(kind, params, r, t, proposed[a]);
    }
    let new_ll = if prior_only {
        0.0
    } else {
        window_loglik(kind, ctx, params, r, window.clone())
    };
    let delta = new_ll - old_ll;
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        match kind {
            FieldKind::Transmission => {
                for t in window {
                    ws.refresh_inf_cell(ctx, params, r, t);
                }
            }
            FieldKind::Admission => {
                let adm = params.admissions.as_ref().unwrap();
                for t in window {
                    ws.adm_factor.set(r, t, adm.omega.get(r, t).exp());
                }
            }
            FieldKind::TestVolume => {}
        }
        true
    } else {
        for (a, t) in window.enumerate() {
            set_field_value(kind, params, r, t, x_b[a]);
        }
        false
    }
}

/// One pass of block updates over a whole field. No-op for the admission
/// field when the admission model is off.
#[allow(clippy::too_many_arguments)]
pub fn field_sweep(
    kind: FieldKind,
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &mut Workspace,
    structures: &Structures,
    scale: f64,
    block_width: usize,
    prior_only: bool,
    rng: &mut ChaCha8Rng,
) -> (u64, u64) {
    let (st, tau) = match kind {
        FieldKind::Transmission => (&structures.mu, params.transmission.hypers.tau),
        FieldKind::TestVolume => (&structures.tests, params.tests.hypers.tau),
        FieldKind::Admission => match (&structures.adm, &params.admissions) {
            (Some(adm_st), Some(adm)) => (&adm_st.field, adm.hypers.tau),
            _ => return (0, 0),
        },
    };
    let n_days = ctx.n_days();
    let width = block_width.clamp(1, n_days);
    let mut accepts = 0;
    let mut attempts = 0;
    for r in 0..ctx.n_regions() {
        let mut start = 0;
        while start < n_days {
            let end = (start + width).min(n_days);
            attempts += 1;
            accepts += update_block(
                kind,
                ctx,
                params,
                ws,
                st,
                tau,
                r,
                start..end,
                scale,
                prior_only,
                rng,
            ) as u64;
            start = end;
        }
    }
    (accepts, attempts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::testutil::two_county_fixture;
    use crate::rng::SeedTree;

    /// In prior-only mode the block kernel must preserve the field prior:
    /// compare long-run cell moments against the dense-inverse covariance.
    #[test]
    fn prior_only_blocks_preserve_field_prior() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let structures = Structures::build(&ctx, &params).unwrap();
        let tau = params.transmission.hypers.tau;
        let dense = structures.mu.kron.to_dense();
        let cov = dense
            .try_inverse()
            .expect("space-time precision invertible")
            / tau;
        let n = ctx.n_regions() * ctx.n_days();

        let tree = SeedTree::new(11);
        let mut rng = tree.stream("fields-test", 0);
        let mut sum = vec![0.0; n];
        let mut sumsq = vec![0.0; n];
        let draws = 4000;
        for _ in 0..draws {
            field_sweep(
                FieldKind::Transmission,
                &ctx,
                &mut params,
                &mut ws,
                &structures,
                0.8,
                5,
                true,
                &mut rng,
            );
            for (k, &v) in params.transmission.mu.flat().iter().enumerate() {
                sum[k] += v;
                sumsq[k] += v * v;
            }
        }
        for k in 0..n {
            let mean = sum[k] / draws as f64;
            let var = sumsq[k] / draws as f64 - mean * mean;
            let (r, t) = (k / ctx.n_days(), k % ctx.n_days());
            let prior_mean = ws.mu_mean.get(r, t);
            let prior_var = cov[(k, k)];
            assert!(
                (mean - prior_mean).abs() < 4.0 * (prior_var / 50.0).sqrt(),
                "cell {k}: mean {mean} vs prior {prior_mean}"
            );
            assert!(
                (var - prior_var).abs() < 0.35 * prior_var,
                "cell {k}: var {var} vs prior {prior_var}"
            );
        }
    }

    /// With data on, accepted blocks must leave the workspace caches
    /// consistent with the parameter state.
    #[test]
    fn block_accepts_keep_caches_consistent() {
        let (ctx, mut params, mut ws) = two_county_fixture();
        let structures = Structures::build(&ctx, &params).unwrap();
        let tree = SeedTree::new(12);
        let mut rng = tree.stream("fields-test", 1);
        let mut total_accepts = 0;
        for kind in [FieldKind::Transmission, FieldKind::TestVolume, FieldKind::Admission] {
            for _ in 0..25 {
                let (acc, att) = field_sweep(
                    kind,
                    &ctx,
                    &mut params,
                    &mut ws,
                    &structures,
                    0.3,
                    4,
                    false,
                    &mut rng,
                );
                assert!(att > 0);
                total_accepts += acc;
            }
        }
        assert!(total_accepts > 0, "no block accepted");
        let fresh = Workspace::new(&ctx, &params);
        for (a, b) in fresh.inf_factor.flat().iter().zip(ws.inf_factor.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fresh.adm_factor.flat().iter().zip(ws.adm_factor.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
