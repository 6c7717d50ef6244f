//! Hospital admissions and within-hospital patient flow.
//!
//! Admissions per (region, day) are Poisson in the infected count with a
//! log-link intensity field. Each admission lands at a hospital according
//! to county catchment probabilities, goes directly to ICU with a per-site
//! probability, and then walks a three-state chain (floor, ICU, discharged)
//! with daily geometric waiting times. Discharge is absorbing. Patients in
//! a state are exchangeable, so daily transitions are drawn as aggregated
//! multinomial counts rather than per-patient records.
//!
//! The same machinery serves two scales: specific hospitals with real
//! catchment maps, and macro mode, which treats an entire state as one
//! hospital with catchment 1 and parent-mean flow parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::observation::impute_allocation;
use crate::stats::{binomial_draw, logit, normal_ln_pdf};

/// Log-scale admission intensity per (region, day). The admission rate for
/// a cell is `infected * exp(omega)`.
#[derive(Debug, Clone)]
pub struct AdmissionField {
    pub omega: Grid<f64>,
}

impl AdmissionField {
    pub fn rate(&self, infected: i64, region: usize, day: usize) -> f64 {
        infected as f64 * self.omega.get(region, day).exp()
    }
}

/// Row-stochastic daily transition matrix over {floor, ICU, discharged},
/// with discharge absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct TransitionMatrix {
    rows: [[f64; 3]; 3],
}

pub const FLOOR: usize = 0;
pub const ICU: usize = 1;
pub const DISCHARGED: usize = 2;

impl TransitionMatrix {
    /// # Errors
    ///
    /// Rows must be probability vectors summing to 1 (within 1e-9) and the
    /// discharge row must be exactly absorbing.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        for (l, row) in rows.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Parameter(format!(
                    "transition row {l} has probabilities outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!(
                    "transition row {l} sums to {sum}, expected 1"
                )));
            }
        }
        if rows[DISCHARGED] != [0.0, 0.0, 1.0] {
            return Err(Error::Parameter("discharge row must be absorbing".into()));
        }
        Ok(TransitionMatrix { rows })
    }

    /// Builds the matrix from the four exit probabilities; staying is the
    /// remainder.
    ///
    /// # Errors
    ///
    /// Any exit pair summing above 1.
    pub fn from_exit_probs(
        floor_to_icu: f64,
        floor_discharge: f64,
        icu_to_floor: f64,
        icu_discharge: f64,
    ) -> Result<Self> {
        TransitionMatrix::new([
            [
                1.0 - floor_to_icu - floor_discharge,
                floor_to_icu,
                floor_discharge,
            ],
            [icu_to_floor, 1.0 - icu_to_floor - icu_discharge, icu_discharge],
            [0.0, 0.0, 1.0],
        ])
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn row(&self, from: usize) -> [f64; 3] {
        self.rows[from]
    }
}

impl TryFrom<[[f64; 3]; 3]> for TransitionMatrix {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        TransitionMatrix::new(rows)
    }
}

impl From<TransitionMatrix> for [[f64; 3]; 3] {
    fn from(m: TransitionMatrix) -> Self {
        m.rows
    }
}

/// Bed capacities used by exceedance summaries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Capacity {
    pub floor: i64,
    pub icu: i64,
}

/// Static description of one hospital: where its patients come from and how
/// they flow once admitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HospitalConfig {
    pub hospital_id: String,
    /// Probability an admission from a county routes to this hospital.
    pub catchment: BTreeMap<String, f64>,
    pub direct_icu_prob: f64,
    pub transition_probs: TransitionMatrix,
    pub capacity: Capacity,
    /// Occupancy at the start of the simulated window.
    #[serde(default)]
    pub initial_floor: i64,
    #[serde(default)]
    pub initial_icu: i64,
}

impl HospitalConfig {
    /// # Errors
    ///
    /// Catchment or direct-ICU probabilities out of range, negative
    /// capacities or initial occupancy.
    pub fn validate(&self) -> Result<()> {
        for (county, &p) in &self.catchment {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!(
                    "hospital '{}': catchment for '{county}' outside [0, 1]",
                    self.hospital_id
                )));
            }
        }
        if !(self.direct_icu_prob > 0.0 && self.direct_icu_prob < 1.0) {
            return Err(Error::Parameter(format!(
                "hospital '{}': direct ICU probability must lie in (0, 1)",
                self.hospital_id
            )));
        }
        if self.capacity.floor < 0 || self.capacity.icu < 0 {
            return Err(Error::Parameter(format!(
                "hospital '{}': negative capacity",
                self.hospital_id
            )));
        }
        if self.initial_floor < 0 || self.initial_icu < 0 {
            return Err(Error::Parameter(format!(
                "hospital '{}': negative initial occupancy",
                self.hospital_id
            )));
        }
        Ok(())
    }

    /// Macro-scale config: the whole state as one hospital, catchment 1 for
    /// every listed region.
    pub fn macro_state(
        state_id: &str,
        region_ids: &[String],
        direct_icu_prob: f64,
        transition_probs: TransitionMatrix,
        capacity: Capacity,
    ) -> HospitalConfig {
        HospitalConfig {
            hospital_id: format!("state-{state_id}"),
            catchment: region_ids.iter().map(|r| (r.clone(), 1.0)).collect(),
            direct_icu_prob,
            transition_probs,
            capacity,
            initial_floor: 0,
            initial_icu: 0,
        }
    }
}

/// Daily census path for one hospital across one simulated replicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HospitalCensus {
    pub hospital_id: String,
    pub floor: Vec<i64>,
    pub icu: Vec<i64>,
    pub admissions: Vec<i64>,
    pub direct_icu_admissions: Vec<i64>,
    pub discharges: Vec<i64>,
}

impl HospitalCensus {
    fn with_capacity(hospital_id: String, n_days: usize) -> Self {
        HospitalCensus {
            hospital_id,
            floor: Vec::with_capacity(n_days),
            icu: Vec::with_capacity(n_days),
            admissions: Vec::with_capacity(n_days),
            direct_icu_admissions: Vec::with_capacity(n_days),
            discharges: Vec::with_capacity(n_days),
        }
    }

    pub fn n_days(&self) -> usize {
        self.floor.len()
    }

    /// Exact bookkeeping audit: occupancy plus cumulative discharges must
    /// equal initial occupancy plus cumulative admissions, every day.
    pub fn conserves_patients(&self, initial_floor: i64, initial_icu: i64) -> bool {
        let mut admitted = 0i64;
        let mut discharged = 0i64;
        for t in 0..self.n_days() {
            admitted += self.admissions[t];
            discharged += self.discharges[t];
            if self.floor[t] + self.icu[t] + discharged != initial_floor + initial_icu + admitted
            {
                return false;
            }
            if self.floor[t] < 0 || self.icu[t] < 0 {
                return false;
            }
        }
        true
    }
}

/// Draws admissions for one cell: Poisson(I * exp(omega)), truncated at I.
pub fn draw_admissions<R: Rng + ?Sized>(infected: i64, omega_val: f64, rng: &mut R) -> i64 {
    debug_assert!(infected >= 0);
    if infected == 0 {
        return 0;
    }
    let rate = infected as f64 * omega_val.exp();
    if rate <= 0.0 {
        return 0;
    }
    // max(0): the small-rate sampler can emit -1 when exp(-rate) rounds to
    // exactly 1, where the correct draw is 0.
    let draw = (Poisson::new(rate).expect("positive rate").sample(rng) as i64).max(0);
    draw.min(infected)
}

/// log P[H = h] under the admission step: Poisson(rate) censored at the
/// infected count, matching [`draw_admissions`].
pub fn admission_ln_pmf(h: i64, rate: f64, infected: i64) -> f64 {
    if h < 0 || h > infected {
        return f64::NEG_INFINITY;
    }
    if h == infected {
        crate::stats::poisson_tail_ln(h, rate.max(0.0))
    } else {
        crate::stats::poisson_ln_pmf(h, rate.max(0.0))
    }
}

/// Routes county admissions to one hospital: Binomial(H, catchment), then a
/// direct-ICU split. Returns (floor_admits, icu_admits).
pub fn route_admission<R: Rng + ?Sized>(
    admissions: i64,
    catchment: f64,
    direct_icu: f64,
    rng: &mut R,
) -> (i64, i64) {
    debug_assert!((0.0..=1.0).contains(&catchment));
    debug_assert!((0.0..=1.0).contains(&direct_icu));
    let at_site = binomial_draw(admissions, catchment, rng);
    let icu = binomial_draw(at_site, direct_icu, rng);
    (at_site - icu, icu)
}

/// One day of patient flow. Current floor and ICU pools transition by
/// aggregated multinomial draws; new admits append afterward, so an admit
/// first moves the following day. Returns (floor, icu, discharge_count).
pub fn step_patient_flow<R: Rng + ?Sized>(
    floor_prev: i64,
    icu_prev: i64,
    floor_admits: i64,
    icu_admits: i64,
    transitions: &TransitionMatrix,
    rng: &mut R,
) -> (i64, i64, i64) {
    let f_row = transitions.row(FLOOR);
    let floor_moves =
        impute_allocation(floor_prev, &f_row, rng).expect("validated transition row");
    let i_row = transitions.row(ICU);
    let icu_moves = impute_allocation(icu_prev, &i_row, rng).expect("validated transition row");

    let floor = floor_moves[FLOOR] + icu_moves[FLOOR] + floor_admits;
    let icu = floor_moves[ICU] + icu_moves[ICU] + icu_admits;
    let discharged = floor_moves[DISCHARGED] + icu_moves[DISCHARGED];
    (floor, icu, discharged)
}

/// Log-prior for per-site probabilities under a shared logit-normal parent:
/// sum over sites of N(logit(v); parent_mean, parent_var).
///
/// # Errors
///
/// Any site value at or outside (0, 1), or non-positive parent variance.
pub fn hierarchical_prior_logit(
    site_values: &[f64],
    parent_mean: f64,
    parent_var: f64,
) -> Result<f64> {
    if parent_var <= 0.0 {
        return Err(Error::Parameter("parent variance must be positive".into()));
    }
    let mut total = 0.0;
    for &v in site_values {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Parameter(format!(
                "site probability {v} outside (0, 1); logit undefined"
            )));
        }
        total += normal_ln_pdf(logit(v), parent_mean, parent_var);
    }
    Ok(total)
}

/// Simulates census paths for every hospital over an ensemble of epidemic
/// replicates.
///
/// For each replicate: draw admissions per (region, day) from that
/// replicate's infected counts and intensity field, split each county's
/// admissions across hospitals and "elsewhere" by catchment (a multinomial,
/// so a patient is never double-counted), then evolve each hospital's flow.
/// Replicate r uses the caller-supplied stream factory so paths are
/// reproducible and order-independent.
///
/// # Errors
///
/// Config validation, unknown catchment region ids, or shape mismatches.
pub fn census_forecast(
    trajectories: &[crate::epi::CompartmentTrajectory],
    omegas: &[Grid<f64>],
    configs: &[HospitalConfig],
    region_ids: &[String],
    seed_tree: &crate::rng::SeedTree,
) -> Result<Vec<Vec<HospitalCensus>>> {
    if trajectories.len() != omegas.len() {
        return Err(Error::Data(
            "trajectory ensemble and intensity fields differ in length".into(),
        ));
    }
    for c in configs {
        c.validate()?;
        for county in c.catchment.keys() {
            if !region_ids.contains(county) {
                return Err(Error::Data(format!(
                    "hospital '{}': catchment names unknown region '{county}'",
                    c.hospital_id
                )));
            }
        }
    }

    // Per-region catchment vector across configs, plus the implicit
    // "elsewhere" sink so each county's split is a proper multinomial.
    let n_hosp = configs.len();
    let catch_by_region: Vec<Vec<f64>> = region_ids
        .iter()
        .map(|rid| {
            let probs: Vec<f64> = configs
                .iter()
                .map(|c| c.catchment.get(rid).copied().unwrap_or(0.0))
                .collect();
            let total: f64 = probs.iter().sum();
            if total > 1.0 + 1e-9 {
                return Err(Error::Data(format!(
                    "region '{rid}': catchment probabilities sum to {total} > 1"
                )));
            }
            Ok(probs)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(trajectories.len());
    for (rep, (traj, omega)) in trajectories.iter().zip(omegas).enumerate() {
        let n_days = traj.n_days();
        if omega.n_regions() != traj.n_regions() || omega.n_days() != n_days {
            return Err(Error::Data("intensity field shape mismatch".into()));
        }
        let mut rng = seed_tree.stream("census-replicate", rep as u64);

        let mut censuses: Vec<HospitalCensus> = configs
            .iter()
            .map(|c| HospitalCensus::with_capacity(c.hospital_id.clone(), n_days))
            .collect();
        let mut floor: Vec<i64> = configs.iter().map(|c| c.initial_floor).collect();
        let mut icu: Vec<i64> = configs.iter().map(|c| c.initial_icu).collect();

        for day in 0..n_days {
            // County admissions, split across sites.
            let mut site_admits = vec![0i64; n_hosp];
            for region in 0..traj.n_regions() {
                let h = draw_admissions(
                    traj.infected.get(region, day),
                    omega.get(region, day),
                    &mut rng,
                );
                if h == 0 || n_hosp == 0 {
                    continue;
                }
                let probs = &catch_by_region[region];
                let elsewhere = (1.0 - probs.iter().sum::<f64>()).max(0.0);
                let mut weights = probs.clone();
                weights.push(elsewhere);
                let split = impute_allocation(h, &weights, &mut rng)?;
                for (s, &cnt) in split[..n_hosp].iter().enumerate() {
                    site_admits[s] += cnt;
                }
            }

            for (s, config) in configs.iter().enumerate() {
                let icu_admits =
                    binomial_draw(site_admits[s], config.direct_icu_prob, &mut rng);
                let floor_admits = site_admits[s] - icu_admits;
                let (f, i, d) = step_patient_flow(
                    floor[s],
                    icu[s],
                    floor_admits,
                    icu_admits,
                    &config.transition_probs,
                    &mut rng,
                );
                floor[s] = f;
                icu[s] = i;
                let c = &mut censuses[s];
                c.floor.push(f);
                c.icu.push(i);
                c.admissions.push(site_admits[s]);
                c.direct_icu_admissions.push(icu_admits);
                c.discharges.push(d);
            }
        }
        out.push(censuses);
    }
    Ok(out)
}

/// Per-day probability that ICU census exceeds `threshold * capacity`,
/// estimated as the fraction of replicates above the line.
///
/// # Errors
///
/// Empty ensemble, threshold outside (0, 1], or ragged replicate lengths.
pub fn icu_exceedance(
    replicates: &[&HospitalCensus],
    capacity: i64,
    threshold: f64,
) -> Result<Vec<f64>> {
    if replicates.is_empty() {
        return Err(Error::Data("exceedance over an empty ensemble".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let n_days = replicates[0].n_days();
    if replicates.iter().any(|c| c.n_days() != n_days) {
        return Err(Error::Data("replicates differ in length".into()));
    }
    let line = threshold * capacity as f64;
    Ok((0..n_days)
        .map(|t| {
            let over = replicates.iter().filter(|c| c.icu[t] as f64 > line).count();
            over as f64 / replicates.len() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epi::{simulate_trajectory, EpiScalarParams, TransmissionField};
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;

    fn default_transitions() -> TransitionMatrix {
        TransitionMatrix::from_exit_probs(0.05, 0.12, 0.08, 0.02).unwrap()
    }

    #[test]
    fn transition_matrix_validation() {
        assert!(TransitionMatrix::new([
            [0.8, 0.1, 0.1],
            [0.1, 0.85, 0.05],
            [0.0, 0.0, 1.0]
        ])
        .is_ok());
        // Row does not sum to 1.
        assert!(TransitionMatrix::new([
            [0.8, 0.1, 0.2],
            [0.1, 0.85, 0.05],
            [0.0, 0.0, 1.0]
        ])
        .is_err());
        // Discharge must absorb.
        assert!(TransitionMatrix::new([
            [0.8, 0.1, 0.1],
            [0.1, 0.85, 0.05],
            [0.1, 0.0, 0.9]
        ])
        .is_err());
        // Exit probabilities exceeding 1 together.
        assert!(TransitionMatrix::from_exit_probs(0.7, 0.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn admissions_zero_infected_and_truncation() {
        let mut rng = SeedTree::new(1).stream("adm", 0);
        assert_eq!(draw_admissions(0, 5.0, &mut rng), 0);
        for _ in 0..200 {
            let h = draw_admissions(7, 3.0, &mut rng); // rate 140, truncates
            assert!(h <= 7);
        }
    }

    #[test]
    fn admission_pmf_is_censored_at_infected() {
        use approx::assert_abs_diff_eq;
        let total: f64 = (0..=4).map(|h| admission_ln_pmf(h, 2.0, 4).exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(admission_ln_pmf(5, 2.0, 4), f64::NEG_INFINITY);
        assert_abs_diff_eq!(
            admission_ln_pmf(1, 2.0, 100),
            crate::stats::poisson_ln_pmf(1, 2.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn admissions_mean_matches_poisson_rate() {
        // I = 1000, exp(omega) = 0.002: mean 2.0.
        let omega = (0.002f64).ln();
        let mut rng = SeedTree::new(2).stream("adm-mean", 0);
        let n = 100_000;
        let total: i64 = (0..n).map(|_| draw_admissions(1000, omega, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.03, "mean {mean}");
    }

    #[test]
    fn routing_edges_and_means() {
        let mut rng = SeedTree::new(3).stream("route", 0);
        assert_eq!(route_admission(50, 0.0, 0.5, &mut rng), (0, 0));
        let (f, i) = route_admission(50, 1.0, 0.0, &mut rng);
        assert_eq!((f, i), (50, 0));

        // H = 1000, catchment 0.3, direct ICU 0.2: means (240, 60).
        let n = 100_000;
        let (mut sf, mut si) = (0i64, 0i64);
        for _ in 0..n {
            let (f, i) = route_admission(1000, 0.3, 0.2, &mut rng);
            sf += f;
            si += i;
        }
        let (mf, mi) = (sf as f64 / n as f64, si as f64 / n as f64);
        assert!((mf - 240.0).abs() / 240.0 < 0.03, "floor mean {mf}");
        assert!((mi - 60.0).abs() / 60.0 < 0.03, "icu mean {mi}");
    }

    #[test]
    fn degenerate_flow_rows() {
        let mut rng = SeedTree::new(4).stream("flow", 0);
        // Entire floor discharges in one day.
        let all_out = TransitionMatrix::new([
            [0.0, 0.0, 1.0],
            [0.0, 0.9, 0.1],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (f, _i, d) = step_patient_flow(40, 0, 0, 0, &all_out, &mut rng);
        assert_eq!(f, 0);
        assert_eq!(d, 40);

        // Frozen flow: nobody moves.
        let frozen = TransitionMatrix::new([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (f, i, d) = step_patient_flow(15, 7, 0, 0, &frozen, &mut rng);
        assert_eq!((f, i, d), (15, 7, 0));
    }

    #[test]
    fn floor_length_of_stay_is_geometric() {
        // No ICU path, discharge probability 0.1: mean stay 10 days.
        let m = TransitionMatrix::new([
            [0.9, 0.0, 0.1],
            [0.0, 0.9, 0.1],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut rng = SeedTree::new(5).stream("los", 0);
        let cohort = 100_000i64;
        let mut floor = cohort;
        let mut patient_days = 0i64;
        let mut day = 0;
        while floor > 0 && day < 2000 {
            patient_days += floor;
            let (f, _, _) = step_patient_flow(floor, 0, 0, 0, &m, &mut rng);
            floor = f;
            day += 1;
        }
        let mean = patient_days as f64 / cohort as f64;
        assert!((mean - 10.0).abs() / 10.0 < 0.02, "mean stay {mean}");
    }

    #[test]
    fn hierarchical_logit_prior_matches_pinned_example() {
        // Site 0.75 under parent (0, 1): logit = 1.0986,
        // log-prior = -0.9189 - 0.6035 = -1.5224.
        let lp = hierarchical_prior_logit(&[0.75], 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(lp, -1.5224, epsilon = 1e-4);
        // Single site at the parent mean: the normal mode.
        let at_mode = hierarchical_prior_logit(&[0.5], 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(at_mode, -0.5 * crate::stats::LN_2PI, epsilon = 1e-12);
        // Symmetric sites contribute equally.
        let a = hierarchical_prior_logit(&[0.75], 0.0, 1.0).unwrap();
        let b = hierarchical_prior_logit(&[0.25], 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        // Degenerate values rejected.
        assert!(hierarchical_prior_logit(&[0.0], 0.0, 1.0).is_err());
        assert!(hierarchical_prior_logit(&[1.0], 0.0, 1.0).is_err());
        assert!(hierarchical_prior_logit(&[0.5], 0.0, 0.0).is_err());
    }

    fn small_ensemble(
        n_reps: usize,
        seed: u64,
    ) -> (Vec<crate::epi::CompartmentTrajectory>, Vec<Grid<f64>>) {
        let n_days = 50;
        let transmission = TransmissionField {
            field: Grid::filled(2, n_days, (0.13f64).ln()),
            day_noise: Grid::zeros(2, n_days),
        };
        let scalars = EpiScalarParams {
            removal_prob: 1.0 / 12.0,
            waning_prob: 0.0,
            vax_efficacy: 0.0,
            vax_lag_days: 14,
        };
        let raw_vax = Grid::<i64>::zeros(2, n_days);
        let tree = SeedTree::new(seed);
        let mut trajs = Vec::new();
        let mut omegas = Vec::new();
        for rep in 0..n_reps {
            let mut rng = tree.stream("traj", rep as u64);
            let traj = simulate_trajectory(
                &[30_000, 50_000],
                &[(0, 0, 10), (1, 2, 5)],
                &transmission,
                &scalars,
                &raw_vax,
                n_days,
                &mut rng,
            )
            .unwrap();
            trajs.push(traj);
            omegas.push(Grid::filled(2, n_days, (0.01f64).ln()));
        }
        (trajs, omegas)
    }

    fn two_hospitals() -> Vec<HospitalConfig> {
        let mut catch_a = BTreeMap::new();
        catch_a.insert("r000".to_string(), 0.6);
        catch_a.insert("r001".to_string(), 0.2);
        let mut catch_b = BTreeMap::new();
        catch_b.insert("r001".to_string(), 0.5);
        vec![
            HospitalConfig {
                hospital_id: "hosp-a".into(),
                catchment: catch_a,
                direct_icu_prob: 0.2,
                transition_probs: default_transitions(),
                capacity: Capacity { floor: 100, icu: 20 },
                initial_floor: 5,
                initial_icu: 2,
            },
            HospitalConfig {
                hospital_id: "hosp-b".into(),
                catchment: catch_b,
                direct_icu_prob: 0.15,
                transition_probs: default_transitions(),
                capacity: Capacity { floor: 60, icu: 10 },
                initial_floor: 0,
                initial_icu: 0,
            },
        ]
    }

    #[test]
    fn census_paths_conserve_patients() {
        let (trajs, omegas) = small_ensemble(20, 11);
        let configs = two_hospitals();
        let region_ids = vec!["r000".to_string(), "r001".to_string()];
        let tree = SeedTree::new(99);
        let ensemble =
            census_forecast(&trajs, &omegas, &configs, &region_ids, &tree).unwrap();
        assert_eq!(ensemble.len(), 20);
        for replicate in &ensemble {
            for (s, census) in replicate.iter().enumerate() {
                assert!(
                    census.conserves_patients(configs[s].initial_floor, configs[s].initial_icu),
                    "conservation failed for {}",
                    census.hospital_id
                );
            }
        }
        // Determinism: same seeds, same paths.
        let again = census_forecast(&trajs, &omegas, &configs, &region_ids, &tree).unwrap();
        assert_eq!(ensemble, again);
    }

    #[test]
    fn macro_mode_equals_full_catchment_single_hospital() {
        let (trajs, omegas) = small_ensemble(5, 13);
        let region_ids = vec!["r000".to_string(), "r001".to_string()];
        let macro_cfg = HospitalConfig::macro_state(
            "00",
            &region_ids,
            0.2,
            default_transitions(),
            Capacity { floor: 500, icu: 80 },
        );
        let mut manual = macro_cfg.clone();
        manual.hospital_id = "manual".into();

        let tree = SeedTree::new(7);
        let a = census_forecast(&trajs, &omegas, &[macro_cfg], &region_ids, &tree).unwrap();
        let b = census_forecast(&trajs, &omegas, &[manual], &region_ids, &tree).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra[0].floor, rb[0].floor);
            assert_eq!(ra[0].icu, rb[0].icu);
            assert_eq!(ra[0].admissions, rb[0].admissions);
        }
    }

    #[test]
    fn exceedance_counts_exactly() {
        let mk = |icu: Vec<i64>| HospitalCensus {
            hospital_id: "h".into(),
            floor: vec![0; icu.len()],
            icu,
            admissions: vec![0; 2],
            direct_icu_admissions: vec![0; 2],
            discharges: vec![0; 2],
        };
        // Capacity 10, threshold 0.5: line at 5 beds, strict exceedance.
        let reps: Vec<HospitalCensus> = vec![
            mk(vec![6, 4]),
            mk(vec![7, 5]),
            mk(vec![3, 11]),
            mk(vec![5, 6]),
        ];
        let refs: Vec<&HospitalCensus> = reps.iter().collect();
        let p = icu_exceedance(&refs, 10, 0.5).unwrap();
        assert_eq!(p, vec![0.5, 0.5]); // day 0: {6,7} exceed; day 1: {11,6}
        assert!(icu_exceedance(&[], 10, 0.5).is_err());
        assert!(icu_exceedance(&refs, 10, 1.5).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let configs = two_hospitals();
        let json = serde_json::to_string_pretty(&configs).unwrap();
        let back: Vec<HospitalConfig> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].hospital_id, "hosp-a");
        assert_eq!(back[0].transition_probs, configs[0].transition_probs);
        // Invalid matrix rejected at parse time.
        let bad = json.replace("0.05", "0.55");
        assert!(serde_json::from_str::<Vec<HospitalConfig>>(&bad).is_err());
    }
}
