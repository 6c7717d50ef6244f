//! Hyperparameter updates: conjugate gamma draws for the field precisions,
//! conjugate inverse-gamma draws for the iid noise variances, and
//! random-walk Metropolis on transformed correlation parameters with the
//! affected precision structure rebuilt on acceptance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::Result;
use crate::grid::Grid;
use crate::precision::{ar1_precision, car_precision, SparsePrecision};
use crate::stats::{inv_logit, logit};

use super::context::ModelContext;
use super::params::ParameterSet;
use super::structures::{RegionStructure, SpaceTimeStructure, Structures, Workspace};

/// Gamma(shape, rate) draw. `rand_distr`'s gamma is scale-parameterized.
fn gamma_rate_draw(shape: f64, rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Inverse-gamma(shape, scale) draw via the reciprocal gamma.
fn inv_gamma_draw(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    1.0 / gamma_rate_draw(shape, scale, rng)
}

/// (x - m)' (Qs (x) Qt) (x - m) without materializing the product: row
/// scans of Qs against temporal matvecs.
fn st_quad(qs: &SparsePrecision, qt: &SparsePrecision, resid: &Grid<f64>) -> f64 {
    let n = qs.dim();
    let w: Vec<Vec<f64>> = (0..n).map(|j| qt.matvec(resid.row(j))).collect();
    let mut quad = 0.0;
    for i in 0..n {
        let ri = resid.row(i);
        for (j, v) in qs.row_entries(i) {
            let dot: f64 = ri.iter().zip(&w[j]).map(|(a, b)| a * b).sum();
            quad += v * dot;
        }
    }
    quad
}

/// Which space-time field a hyperparameter update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StField {
    Transmission,
    TestVolume,
    Admission,
}

fn st_resid(kind: StField, params: &ParameterSet, ws: &Workspace) -> Grid<f64> {
    match kind {
        StField::Transmission => {
            let mut g = params.transmission.mu.clone();
            for (v, m) in g.flat_mut().iter_mut().zip(ws.mu_mean.flat()) {
                *v -= m;
            }
            g
        }
        StField::TestVolume => {
            let mut g = params.tests.field.clone();
            for v in g.flat_mut() {
                *v -= params.tests.mean;
            }
            g
        }
        StField::Admission => {
            let adm = params.admissions.as_ref().unwrap();
            let mut g = adm.omega.clone();
            for (v, m) in g.flat_mut().iter_mut().zip(ws.omega_mean.flat()) {
                *v -= m;
            }
            g
        }
    }
}

fn st_structure<'a>(kind: StField, structures: &'a Structures) -> &'a SpaceTimeStructure {
    match kind {
        StField::Transmission => &structures.mu,
        StField::TestVolume => &structures.tests,
        StField::Admission => &structures.adm.as_ref().unwrap().field,
    }
}

fn st_structure_mut<'a>(kind: StField, structures: &'a mut Structures) -> &'a mut SpaceTimeStructure {
    match kind {
        StField::Transmission => &mut structures.mu,
        StField::TestVolume => &mut structures.tests,
        StField::Admission => &mut structures.adm.as_mut().unwrap().field,
    }
}

/// Conjugate precision draws for every field, given the current structures.
pub fn update_taus(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &Workspace,
    structures: &Structures,
    priors: &super::params::Priors,
    rng: &mut ChaCha8Rng,
) {
    let (a, b) = priors.tau;
    let cells = (ctx.n_regions() * ctx.n_days()) as f64;
    let regions = ctx.n_regions() as f64;

    let quad = st_quad(
        &structures.mu.qs,
        &structures.mu.qt,
        &st_resid(StField::Transmission, params, ws),
    );
    params.transmission.hypers.tau = gamma_rate_draw(a + cells / 2.0, b + quad / 2.0, rng);

    let quad = structures
        .phi
        .quadform_about(&params.transmission.phi.values, params.transmission.phi.hypers.parent_mean);
    params.transmission.phi.hypers.tau =
        gamma_rate_draw(a + regions / 2.0, b + quad / 2.0, rng);

    for (k, alpha) in params.transmission.alphas.iter_mut().enumerate() {
        let quad = structures.alphas[k].quadform_about(&alpha.values, alpha.hypers.parent_mean);
        alpha.hypers.tau = gamma_rate_draw(a + regions / 2.0, b + quad / 2.0, rng);
    }

    let quad = st_quad(
        &structures.tests.qs,
        &structures.tests.qt,
        &st_resid(StField::TestVolume, params, ws),
    );
    params.tests.hypers.tau = gamma_rate_draw(a + cells / 2.0, b + quad / 2.0, rng);

    if params.admissions.is_some() {
        let st = structures.adm.as_ref().unwrap();
        let quad = st_quad(
            &st.field.qs,
            &st.field.qt,
            &st_resid(StField::Admission, params, ws),
        );
        let adm = params.admissions.as_mut().unwrap();
        adm.hypers.tau = gamma_rate_draw(a + cells / 2.0, b + quad / 2.0, rng);
        let quad = st.phi.quadform_about(&adm.phi.values, adm.phi.hypers.parent_mean);
        adm.phi.hypers.tau = gamma_rate_draw(a + regions / 2.0, b + quad / 2.0, rng);
    }
}

/// Conjugate inverse-gamma draws for the two iid noise variances.
pub fn update_noise_variances(
    params: &mut ParameterSet,
    priors: &super::params::Priors,
    rng: &mut ChaCha8Rng,
) {
    let eps = params.transmission.epsilon.flat();
    let n = eps.len() as f64;
    let ss: f64 = eps.iter().map(|e| e * e).sum();
    params.transmission.sigma2 =
        inv_gamma_draw(priors.sigma2.0 + n / 2.0, priors.sigma2.1 + ss / 2.0, rng);

    let noise = params.detection.noise.flat();
    let ss: f64 = noise.iter().map(|e| e * e).sum();
    params.detection.sigma2 = inv_gamma_draw(
        priors.sigma_tilde2.0 + noise.len() as f64 / 2.0,
        priors.sigma_tilde2.1 + ss / 2.0,
        rng,
    );
}

/// Index layout of the correlation-update scales and tallies. Slots for
/// the admission field exist even when unused, so indices stay stable.
pub const RHO_MU_S: usize = 0;
pub const RHO_MU_T: usize = 1;
pub const RHO_TESTS_S: usize = 2;
pub const RHO_TESTS_T: usize = 3;
pub const RHO_ADM_S: usize = 4;
pub const RHO_ADM_T: usize = 5;
pub const RHO_PHI: usize = 6;
pub const RHO_ADM_PHI: usize = 7;
pub const RHO_FIXED_SLOTS: usize = 8;

pub fn rho_slot_count(n_alphas: usize) -> usize {
    RHO_FIXED_SLOTS + n_alphas
}

/// Spatial-correlation move of one space-time field: random walk on the
/// logit scale against the field's Gaussian density, flat prior on [0, 1).
fn update_st_rho_s(
    ctx: &ModelContext,
    kind: StField,
    params: &mut ParameterSet,
    ws: &Workspace,
    structures: &mut Structures,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let hypers = match kind {
        StField::Transmission => &params.transmission.hypers,
        StField::TestVolume => &params.tests.hypers,
        StField::Admission => &params.admissions.as_ref().unwrap().hypers,
    };
    let (tau, rho, rho_t) = (hypers.tau, hypers.rho_s, hypers.rho_t);
    let step: f64 = Normal::new(0.0, scale).unwrap().sample(rng);
    let proposed = inv_logit(logit(rho.clamp(1e-12, 1.0 - 1e-12)) + step);
    if !(0.0..1.0).contains(&proposed) {
        return Ok(false);
    }
    let Ok(qs_new) = car_precision(&ctx.graph, proposed, 1.0) else {
        return Ok(false);
    };
    let Ok(ld_new) = qs_new.log_det() else {
        return Ok(false);
    };
    let st = st_structure(kind, structures);
    let resid = st_resid(kind, params, ws);
    let quad_old = st_quad(&st.qs, &st.qt, &resid);
    let quad_new = st_quad(&qs_new, &st.qt, &resid);
    let t_days = ctx.n_days() as f64;
    let delta = 0.5 * t_days * (ld_new - st.qs_logdet) - 0.5 * tau * (quad_new - quad_old)
        + (proposed * (1.0 - proposed)).ln()
        - (rho * (1.0 - rho)).ln();
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        *st_structure_mut(kind, structures) =
            SpaceTimeStructure::build(&ctx.graph, ctx.n_days(), proposed, rho_t)?;
        match kind {
            StField::Transmission => params.transmission.hypers.rho_s = proposed,
            StField::TestVolume => params.tests.hypers.rho_s = proposed,
            StField::Admission => params.admissions.as_mut().unwrap().hypers.rho_s = proposed,
        }
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Temporal-correlation move: random walk on the atanh scale, flat prior
/// on (-1, 1).
fn update_st_rho_t(
    ctx: &ModelContext,
    kind: StField,
    params: &mut ParameterSet,
    ws: &Workspace,
    structures: &mut Structures,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let hypers = match kind {
        StField::Transmission => &params.transmission.hypers,
        StField::TestVolume => &params.tests.hypers,
        StField::Admission => &params.admissions.as_ref().unwrap().hypers,
    };
    let (tau, rho_s, rho) = (hypers.tau, hypers.rho_s, hypers.rho_t);
    let step: f64 = Normal::new(0.0, scale).unwrap().sample(rng);
    let proposed = (rho.atanh() + step).tanh();
    if proposed.abs() >= 1.0 || !proposed.is_finite() {
        return Ok(false);
    }
    let Ok(qt_new) = ar1_precision(ctx.n_days(), proposed) else {
        return Ok(false);
    };
    let Ok(ld_new) = qt_new.log_det() else {
        return Ok(false);
    };
    let st = st_structure(kind, structures);
    let resid = st_resid(kind, params, ws);
    let quad_old = st_quad(&st.qs, &st.qt, &resid);
    let quad_new = st_quad(&st.qs, &qt_new, &resid);
    let regions = ctx.n_regions() as f64;
    let delta = 0.5 * regions * (ld_new - st.qt_logdet) - 0.5 * tau * (quad_new - quad_old)
        + (1.0 - proposed * proposed).ln()
        - (1.0 - rho * rho).ln();
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        *st_structure_mut(kind, structures) =
            SpaceTimeStructure::build(&ctx.graph, ctx.n_days(), rho_s, proposed)?;
        match kind {
            StField::Transmission => params.transmission.hypers.rho_t = proposed,
            StField::TestVolume => params.tests.hypers.rho_t = proposed,
            StField::Admission => params.admissions.as_mut().unwrap().hypers.rho_t = proposed,
        }
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Which regional CAR field a correlation move targets.
enum RegionTarget {
    Phi,
    Alpha(usize),
    AdmPhi,
}

fn update_region_rho(
    ctx: &ModelContext,
    target: RegionTarget,
    params: &mut ParameterSet,
    structures: &mut Structures,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let (values, hypers, st): (&[f64], _, &RegionStructure) = match &target {
        RegionTarget::Phi => (
            &params.transmission.phi.values,
            params.transmission.phi.hypers,
            &structures.phi,
        ),
        RegionTarget::Alpha(k) => (
            &params.transmission.alphas[*k].values,
            params.transmission.alphas[*k].hypers,
            &structures.alphas[*k],
        ),
        RegionTarget::AdmPhi => {
            let adm = params.admissions.as_ref().unwrap();
            (
                &adm.phi.values,
                adm.phi.hypers,
                &structures.adm.as_ref().unwrap().phi,
            )
        }
    };
    let rho = hypers.rho;
    let step: f64 = Normal::new(0.0, scale).unwrap().sample(rng);
    let proposed = inv_logit(logit(rho.clamp(1e-12, 1.0 - 1e-12)) + step);
    if !(0.0..1.0).contains(&proposed) {
        return Ok(false);
    }
    let Ok(new_rs) = RegionStructure::build(&ctx.graph, proposed) else {
        return Ok(false);
    };
    let quad_old = st.quadform_about(values, hypers.parent_mean);
    let quad_new = new_rs.quadform_about(values, hypers.parent_mean);
    let delta = 0.5 * (new_rs.logdet - st.logdet) - 0.5 * hypers.tau * (quad_new - quad_old)
        + (proposed * (1.0 - proposed)).ln()
        - (rho * (1.0 - rho)).ln();
    if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
        match target {
            RegionTarget::Phi => {
                params.transmission.phi.hypers.rho = proposed;
                structures.phi = new_rs;
            }
            RegionTarget::Alpha(k) => {
                params.transmission.alphas[k].hypers.rho = proposed;
                structures.alphas[k] = new_rs;
            }
            RegionTarget::AdmPhi => {
                params.admissions.as_mut().unwrap().phi.hypers.rho = proposed;
                structures.adm.as_mut().unwrap().phi = new_rs;
            }
        }
        Ok(true)
    } else {
        Ok(false)
    }
}

/// One pass over every correlation parameter. `scales` and the returned
/// tallies follow the RHO_* slot layout.
pub fn rho_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &Workspace,
    structures: &mut Structures,
    scales: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(u64, u64)>> {
    fn run(slot: usize, ok: Result<bool>, tally: &mut [(u64, u64)]) -> Result<()> {
        tally[slot].1 += 1;
        tally[slot].0 += ok? as u64;
        Ok(())
    }
    let n_alphas = params.transmission.alphas.len();
    let mut tally = vec![(0u64, 0u64); rho_slot_count(n_alphas)];
    run(
        RHO_MU_S,
        update_st_rho_s(ctx, StField::Transmission, params, ws, structures, scales[RHO_MU_S], rng),
        &mut tally,
    )?;
    run(
        RHO_MU_T,
        update_st_rho_t(ctx, StField::Transmission, params, ws, structures, scales[RHO_MU_T], rng),
        &mut tally,
    )?;
    run(
        RHO_TESTS_S,
        update_st_rho_s(ctx, StField::TestVolume, params, ws, structures, scales[RHO_TESTS_S], rng),
        &mut tally,
    )?;
    run(
        RHO_TESTS_T,
        update_st_rho_t(ctx, StField::TestVolume, params, ws, structures, scales[RHO_TESTS_T], rng),
        &mut tally,
    )?;
    if params.admissions.is_some() {
        run(
            RHO_ADM_S,
            update_st_rho_s(ctx, StField::Admission, params, ws, structures, scales[RHO_ADM_S], rng),
            &mut tally,
        )?;
        run(
            RHO_ADM_T,
            update_st_rho_t(ctx, StField::Admission, params, ws, structures, scales[RHO_ADM_T], rng),
            &mut tally,
        )?;
        run(
            RHO_ADM_PHI,
            update_region_rho(ctx, RegionTarget::AdmPhi, params, structures, scales[RHO_ADM_PHI], rng),
            &mut tally,
        )?;
    }
    run(
        RHO_PHI,
        update_region_rho(ctx, RegionTarget::Phi, params, structures, scales[RHO_PHI], rng),
        &mut tally,
    )?;
    for k in 0..n_alphas {
        run(
            RHO_FIXED_SLOTS + k,
            update_region_rho(ctx, RegionTarget::Alpha(k), params, structures, scales[RHO_FIXED_SLOTS + k], rng),
            &mut tally,
        )?;
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::params::Priors;
    use crate::inference::testutil::two_county_fixture;
    use crate::precision::kron_precision;
    use crate::rng::SeedTree;

    #[test]
    fn st_quad_matches_kronecker_quadform() {
        let (ctx, params, ws) = two_county_fixture();
        let structures = Structures::build(&ctx, &params).unwrap();
        let resid = st_resid(StField::Transmission, &params, &ws);
        let direct = structures.mu.kron.quadform(resid.flat(), &[]);
        let scanned = st_quad(&structures.mu.qs, &structures.mu.qt, &resid);
        assert!((direct - scanned).abs() < 1e-9 * (1.0 + direct.abs()));

        // Under a different spatial matrix too.
        let qs2 = car_precision(&ctx.graph, 0.83, 1.0).unwrap();
        let dense2 = kron_precision(&qs2, &structures.mu.qt).unwrap();
        let direct2 = dense2.quadform(resid.flat(), &[]);
        let scanned2 = st_quad(&qs2, &structures.mu.qt, &resid);
        assert!((direct2 - scanned2).abs() < 1e-9 * (1.0 + direct2.abs()));
    }

    #[test]
    fn tau_conjugate_matches_analytic_moments() {
        let (ctx, mut params, ws) = two_county_fixture();
        let structures = Structures::build(&ctx, &params).unwrap();
        let priors = Priors::default();
        let tree = SeedTree::new(31);
        let mut rng = tree.stream("hypers-test", 0);

        let resid = st_resid(StField::Transmission, &params, &ws);
        let quad = st_quad(&structures.mu.qs, &structures.mu.qt, &resid);
        let n = (ctx.n_regions() * ctx.n_days()) as f64;
        let shape = priors.tau.0 + n / 2.0;
        let rate = priors.tau.1 + quad / 2.0;

        let draws = 40_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            update_taus(&ctx, &mut params, &ws, &structures, &priors, &mut rng);
            let v = params.transmission.hypers.tau;
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let exact_mean = shape / rate;
        let exact_var = shape / (rate * rate);
        assert!((mean - exact_mean).abs() < 4.0 * (exact_var / draws as f64).sqrt() + 1e-9);
        assert!((var - exact_var).abs() < 0.1 * exact_var);
    }

    #[test]
    fn sigma2_conjugate_matches_analytic_moments() {
        let (_ctx, mut params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let tree = SeedTree::new(32);
        let mut rng = tree.stream("hypers-test", 1);
        let ss: f64 = params.transmission.epsilon.flat().iter().map(|e| e * e).sum();
        let n = params.transmission.epsilon.flat().len() as f64;
        let shape = priors.sigma2.0 + n / 2.0;
        let scale = priors.sigma2.1 + ss / 2.0;
        let draws = 40_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            update_noise_variances(&mut params, &priors, &mut rng);
            sum += params.transmission.sigma2;
        }
        let mean = sum / draws as f64;
        let exact_mean = scale / (shape - 1.0);
        assert!(
            (mean - exact_mean).abs() < 0.05 * exact_mean,
            "{mean} vs {exact_mean}"
        );
    }

    #[test]
    fn rho_sweep_stays_in_range_and_rebuilds_structures() {
        let (ctx, mut params, ws) = two_county_fixture();
        let mut structures = Structures::build(&ctx, &params).unwrap();
        let tree = SeedTree::new(33);
        let mut rng = tree.stream("hypers-test", 2);
        let scales = vec![0.5; rho_slot_count(0)];
        let mut accepted = 0;
        for _ in 0..200 {
            let tally =
                rho_sweep(&ctx, &mut params, &ws, &mut structures, &scales, &mut rng).unwrap();
            accepted += tally.iter().map(|t| t.0).sum::<u64>();
        }
        assert!(accepted > 0, "no correlation move accepted");
        let h = &params.transmission.hypers;
        assert!((0.0..1.0).contains(&h.rho_s) && h.rho_t.abs() < 1.0);
        // The structure must reflect the current parameters exactly: its
        // log density at the current field equals one built from scratch.
        let rebuilt = Structures::build(&ctx, &params).unwrap();
        let resid = st_resid(StField::Transmission, &params, &ws);
        let a = st_quad(&structures.mu.qs, &structures.mu.qt, &resid);
        let b = st_quad(&rebuilt.mu.qs, &rebuilt.mu.qt, &resid);
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        assert!((structures.mu.qs_logdet - rebuilt.mu.qs_logdet).abs() < 1e-9);
        assert!((structures.mu.qt_logdet - rebuilt.mu.qt_logdet).abs() < 1e-9);
    }
}
