//! Compartment bookkeeping and the forward epidemic simulator.
//!
//! Each region runs a discretized stochastic SIR process on daily steps.
//! New infections are Poisson with rate `I * B * S / N` evaluated at the
//! previous day, where `B = exp(mu + eps)` is the transmission intensity;
//! removals and waning are binomial thinning of the infected and removed
//! pools; vaccination moves susceptibles to removed with a fixed reporting
//! lag. Susceptibles are reconstructed from `S = N - I - R`, so population
//! conservation holds by construction and the evolution identities are what
//! the tests check.
//!
//! Dynamics start at each region's seed day (in calibration, the first day
//! with a reported case). Days before the seed are inactive: everyone
//! susceptible, all event series zero.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::stats::binomial_draw;

/// Scalar transition parameters shared by all regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpiScalarParams {
    /// Daily probability an infected individual recovers or is otherwise
    /// removed (geometric residence in I with mean 1/removal_prob days).
    pub removal_prob: f64,
    /// Daily probability a removed individual loses immunity.
    pub waning_prob: f64,
    /// Probability a reported vaccination effectively immunizes.
    pub vax_efficacy: f64,
    /// Days between a vaccination report and its effect.
    pub vax_lag_days: usize,
}

impl EpiScalarParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("removal_prob", self.removal_prob),
            ("waning_prob", self.waning_prob),
            ("vax_efficacy", self.vax_efficacy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Log transmission intensity per (region, day): a smooth field plus
/// independent day-to-day noise. `B = exp(field + day_noise)`.
#[derive(Debug, Clone)]
pub struct TransmissionField {
    pub field: Grid<f64>,
    pub day_noise: Grid<f64>,
}

impl TransmissionField {
    pub fn log_intensity(&self, region: usize, day: usize) -> f64 {
        self.field.get(region, day) + self.day_noise.get(region, day)
    }
}

/// Poisson rate for new infections given the previous day's state.
#[inline]
pub fn infection_rate(infected: i64, susceptible: i64, population: i64, log_intensity: f64) -> f64 {
    debug_assert!(population > 0);
    infected as f64 * log_intensity.exp() * susceptible as f64 / population as f64
}

/// Compartment counts and daily event series for every region.
///
/// Counts are region-major grids. `infected` and `removed` are running
/// states; susceptibles are derived. The event grids hold new infections
/// (`y`), removals (`c`), waning (`d`), and effective vaccinations (`e`).
#[derive(Debug, Clone)]
pub struct CompartmentTrajectory {
    populations: Vec<i64>,
    start: Vec<Option<usize>>,
    pub y: Grid<i64>,
    pub c: Grid<i64>,
    pub d: Grid<i64>,
    pub e: Grid<i64>,
    pub infected: Grid<i64>,
    pub removed: Grid<i64>,
}

impl CompartmentTrajectory {
    pub fn n_regions(&self) -> usize {
        self.populations.len()
    }

    pub fn n_days(&self) -> usize {
        self.y.n_days()
    }

    pub fn population(&self, region: usize) -> i64 {
        self.populations[region]
    }

    /// First active day, if the region is ever seeded.
    pub fn start_day(&self, region: usize) -> Option<usize> {
        self.start[region]
    }

    pub fn susceptible(&self, region: usize, day: usize) -> i64 {
        self.populations[region] - self.infected.get(region, day) - self.removed.get(region, day)
    }

    /// Empty trajectory: all regions inactive.
    pub fn empty(populations: Vec<i64>, n_days: usize) -> Self {
        let n = populations.len();
        CompartmentTrajectory {
            populations,
            start: vec![None; n],
            y: Grid::zeros(n, n_days),
            c: Grid::zeros(n, n_days),
            d: Grid::zeros(n, n_days),
            e: Grid::zeros(n, n_days),
            infected: Grid::zeros(n, n_days),
            removed: Grid::zeros(n, n_days),
        }
    }

    /// Seeds a region: on `day`, `count` new infections appear and the
    /// region becomes active.
    pub fn seed(&mut self, region: usize, day: usize, count: i64) {
        debug_assert!(self.start[region].is_none(), "region already seeded");
        debug_assert!(count > 0 && count <= self.populations[region]);
        self.start[region] = Some(day);
        self.y.set(region, day, count);
        self.infected.set(region, day, count);
    }

    /// Rebuilds the running `infected`/`removed` states of one region from
    /// its event series. Used after bulk edits to the events.
    pub fn recompute_region(&mut self, region: usize) {
        let Some(t0) = self.start[region] else { return };
        let n_days = self.n_days();
        let mut i_cur = self.y.get(region, t0);
        let mut r_cur = 0i64;
        self.infected.set(region, t0, i_cur);
        self.removed.set(region, t0, r_cur);
        for t in (t0 + 1)..n_days {
            i_cur = i_cur - self.c.get(region, t) + self.y.get(region, t);
            r_cur = r_cur - self.d.get(region, t) + self.c.get(region, t) + self.e.get(region, t);
            self.infected.set(region, t, i_cur);
            self.removed.set(region, t, r_cur);
        }
    }

    /// True when every count is within support: events non-negative,
    /// removals within the infected pool, waning within the removed pool,
    /// and occupancy never exceeding the population.
    pub fn region_is_valid(&self, region: usize) -> bool {
        let Some(t0) = self.start[region] else { return true };
        for t in t0..self.n_days() {
            let i = self.infected.get(region, t);
            let r = self.removed.get(region, t);
            if i < 0 || r < 0 || i + r > self.populations[region] {
                return false;
            }
            if t > t0 {
                if self.y.get(region, t) < 0
                    || self.c.get(region, t) < 0
                    || self.d.get(region, t) < 0
                    || self.e.get(region, t) < 0
                    || self.c.get(region, t) > self.infected.get(region, t - 1)
                    || self.d.get(region, t) > self.removed.get(region, t - 1)
                    || self.y.get(region, t) > self.susceptible(region, t - 1)
                {
                    return false;
                }
            }
        }
        true
    }

    /// Shifts one day's new-infection count and propagates the running
    /// states. Does not validate support; callers check before committing.
    pub fn apply_y_delta(&mut self, region: usize, day: usize, delta: i64) {
        *self.y.row_mut(region).get_mut(day).unwrap() += delta;
        for t in day..self.n_days() {
            *self.infected.row_mut(region).get_mut(t).unwrap() += delta;
        }
    }

    /// Shifts one day's removal count: infected down, removed up from that
    /// day onward.
    pub fn apply_c_delta(&mut self, region: usize, day: usize, delta: i64) {
        *self.c.row_mut(region).get_mut(day).unwrap() += delta;
        for t in day..self.n_days() {
            *self.infected.row_mut(region).get_mut(t).unwrap() -= delta;
            *self.removed.row_mut(region).get_mut(t).unwrap() += delta;
        }
    }

    /// Shifts one day's waning count: removed down from that day onward.
    pub fn apply_d_delta(&mut self, region: usize, day: usize, delta: i64) {
        *self.d.row_mut(region).get_mut(day).unwrap() += delta;
        for t in day..self.n_days() {
            *self.removed.row_mut(region).get_mut(t).unwrap() -= delta;
        }
    }

    /// Shifts one day's effective-vaccination count: removed up from that
    /// day onward.
    pub fn apply_e_delta(&mut self, region: usize, day: usize, delta: i64) {
        *self.e.row_mut(region).get_mut(day).unwrap() += delta;
        for t in day..self.n_days() {
            *self.removed.row_mut(region).get_mut(t).unwrap() += delta;
        }
    }

    /// Total new infections over the active window of all regions.
    pub fn cumulative_infections(&self) -> i64 {
        self.y.flat().iter().sum()
    }
}

/// Starts each region's dynamics at its first day with a positive reported
/// count: new infections equal the reported count that day, all of them
/// infected, none yet removed. Regions with no reported cases stay
/// inactive.
pub fn init_trajectory(reported: &Grid<i64>, populations: &[i64]) -> Result<CompartmentTrajectory> {
    if reported.n_regions() != populations.len() {
        return Err(Error::Data(
            "reported-case grid and population table disagree on region count".into(),
        ));
    }
    let mut traj = CompartmentTrajectory::empty(populations.to_vec(), reported.n_days());
    for r in 0..reported.n_regions() {
        if let Some(t0) = reported.row(r).iter().position(|&v| v > 0) {
            let seed = reported.get(r, t0);
            if seed > populations[r] {
                return Err(Error::Data(format!(
                    "region {r}: first reported count {seed} exceeds population"
                )));
            }
            traj.seed(r, t0, seed);
        }
    }
    Ok(traj)
}

/// Draws new infections: Poisson with rate `I * B * S / N`, clamped at the
/// susceptible pool so the pool can never go negative.
pub fn step_infections<R: Rng + ?Sized>(
    infected_prev: i64,
    susceptible_prev: i64,
    population: i64,
    log_intensity: f64,
    rng: &mut R,
) -> i64 {
    let rate = infection_rate(infected_prev, susceptible_prev, population, log_intensity);
    if rate <= 0.0 {
        return 0;
    }
    // max(0): the small-rate sampler can emit -1 when exp(-rate) rounds to
    // exactly 1, where the correct draw is 0.
    let draw = (Poisson::new(rate).expect("positive rate").sample(rng) as i64).max(0);
    draw.min(susceptible_prev)
}

/// log P[Y = y] under the infection step: Poisson(rate) censored at
/// `s_prev`, matching [`step_infections`]. Mass beyond the cap piles onto
/// y = s_prev; y outside [0, s_prev] is impossible.
pub fn infection_ln_pmf(y: i64, rate: f64, s_prev: i64) -> f64 {
    if y < 0 || y > s_prev {
        return f64::NEG_INFINITY;
    }
    if y == s_prev {
        crate::stats::poisson_tail_ln(y, rate.max(0.0))
    } else {
        crate::stats::poisson_ln_pmf(y, rate.max(0.0))
    }
}

/// Draws removals: Binomial(I, removal_prob).
pub fn step_removals<R: Rng + ?Sized>(infected_prev: i64, removal_prob: f64, rng: &mut R) -> i64 {
    binomial_draw(infected_prev, removal_prob, rng)
}

/// Draws waning: Binomial(R, waning_prob).
pub fn step_waning<R: Rng + ?Sized>(removed_prev: i64, waning_prob: f64, rng: &mut R) -> i64 {
    binomial_draw(removed_prev, waning_prob, rng)
}

/// Draws effective vaccinations from reports `vax_lag_days` earlier:
/// Binomial(raw_lagged, efficacy). Days before the series starts contribute
/// nothing.
pub fn step_vaccination<R: Rng + ?Sized>(raw_lagged: i64, efficacy: f64, rng: &mut R) -> i64 {
    binomial_draw(raw_lagged, efficacy, rng)
}

/// Applies one day's transitions to the previous state. Pure arithmetic:
/// `I' = I - c + y`, `R' = R - d + c + e`, with `e` clamped so occupancy
/// `I' + R'` never exceeds the population. Returns (infected, removed,
/// e_applied).
pub fn apply_transitions(
    infected_prev: i64,
    removed_prev: i64,
    population: i64,
    y: i64,
    c: i64,
    d: i64,
    e: i64,
) -> (i64, i64, i64) {
    debug_assert!(c <= infected_prev && d <= removed_prev);
    let infected = infected_prev - c + y;
    let removed_no_vax = removed_prev - d + c;
    let headroom = population - infected - removed_no_vax;
    debug_assert!(headroom >= 0);
    let e_applied = e.min(headroom).max(0);
    (infected, removed_no_vax + e_applied, e_applied)
}

/// Advances one region by one day: draws all four transitions from the
/// day-`day - 1` state, applies them, and records the results at `day`.
pub fn advance_day<R: Rng + ?Sized>(
    traj: &mut CompartmentTrajectory,
    transmission: &TransmissionField,
    scalars: &EpiScalarParams,
    raw_vax: &Grid<i64>,
    region: usize,
    day: usize,
    rng: &mut R,
) {
    debug_assert!(day > 0);
    let prev = day - 1;
    let i_prev = traj.infected.get(region, prev);
    let r_prev = traj.removed.get(region, prev);
    let s_prev = traj.susceptible(region, prev);
    let n = traj.population(region);

    let y = step_infections(
        i_prev,
        s_prev,
        n,
        transmission.log_intensity(region, prev),
        rng,
    );
    let c = step_removals(i_prev, scalars.removal_prob, rng);
    let d = step_waning(r_prev, scalars.waning_prob, rng);
    let raw_lagged = day
        .checked_sub(scalars.vax_lag_days)
        .map_or(0, |t| raw_vax.get(region, t));
    let e = step_vaccination(raw_lagged, scalars.vax_efficacy, rng);

    let (i_new, r_new, e_applied) = apply_transitions(i_prev, r_prev, n, y, c, d, e);
    traj.y.set(region, day, y);
    traj.c.set(region, day, c);
    traj.d.set(region, day, d);
    traj.e.set(region, day, e_applied);
    traj.infected.set(region, day, i_new);
    traj.removed.set(region, day, r_new);
}

/// Runs the forward model for every region from its seed day to the end of
/// the window.
///
/// # Errors
///
/// Parameter validation, grid shape mismatches, or a seed exceeding its
/// region's population.
#[allow(clippy::too_many_arguments)]
pub fn simulate_trajectory<R: Rng + ?Sized>(
    populations: &[i64],
    seeds: &[(usize, usize, i64)],
    transmission: &TransmissionField,
    scalars: &EpiScalarParams,
    raw_vax: &Grid<i64>,
    n_days: usize,
    rng: &mut R,
) -> Result<CompartmentTrajectory> {
    scalars.validate()?;
    let n_regions = populations.len();
    if transmission.field.n_regions() != n_regions
        || transmission.field.n_days() != n_days
        || transmission.day_noise.n_regions() != n_regions
        || transmission.day_noise.n_days() != n_days
        || raw_vax.n_regions() != n_regions
        || raw_vax.n_days() != n_days
    {
        return Err(Error::Data("simulation grid shapes disagree".into()));
    }
    let mut traj = CompartmentTrajectory::empty(populations.to_vec(), n_days);
    for &(region, day, count) in seeds {
        if region >= n_regions || day >= n_days {
            return Err(Error::Data(format!(
                "seed ({region}, {day}) outside the simulation window"
            )));
        }
        if count <= 0 || count > populations[region] {
            return Err(Error::Data(format!(
                "seed count {count} invalid for region {region}"
            )));
        }
        traj.seed(region, day, count);
    }
    for region in 0..n_regions {
        if let Some(t0) = traj.start_day(region) {
            for day in (t0 + 1)..n_days {
                advance_day(&mut traj, transmission, scalars, raw_vax, region, day, rng);
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn flat_transmission(n_regions: usize, n_days: usize, log_b: f64) -> TransmissionField {
        TransmissionField {
            field: Grid::filled(n_regions, n_days, log_b),
            day_noise: Grid::zeros(n_regions, n_days),
        }
    }

    fn default_scalars() -> EpiScalarParams {
        EpiScalarParams {
            removal_prob: 10.0 / 140.0,
            waning_prob: 10.0 / 3660.0,
            vax_efficacy: 0.8,
            vax_lag_days: 14,
        }
    }

    #[test]
    fn vanishing_rate_never_yields_negative_infections() {
        // Rates below f64 epsilon trip a sampler edge case that used to
        // return -1; the draw must stay at zero.
        let mut rng = SeedTree::new(11).stream("tiny", 0);
        for _ in 0..200 {
            let y = step_infections(3, 99_997, 100_000, -60.0, &mut rng);
            assert_eq!(y, 0);
        }
    }

    #[test]
    fn transitions_match_pinned_example() {
        // From (I, R) = (8, 2) in a population of 100 with draws
        // y = 5, c = 2, d = 1, e = 3: next state I = 11, R = 6, S = 83.
        let (i, r, e) = apply_transitions(8, 2, 100, 5, 2, 1, 3);
        assert_eq!((i, r, e), (11, 6, 3));
        assert_eq!(100 - i - r, 83);
    }

    #[test]
    fn vaccination_clamp_keeps_occupancy_within_population() {
        // Headroom after infection flows is 4, so only 4 of 50 apply.
        let (i, r, e) = apply_transitions(10, 80, 100, 6, 0, 0, 50);
        assert_eq!(e, 4);
        assert_eq!(i + r, 100);
    }

    #[test]
    fn infection_pmf_is_censored_at_susceptibles() {
        use crate::stats::poisson_ln_pmf;
        use approx::assert_abs_diff_eq;
        // Interior matches the plain Poisson pmf.
        assert_abs_diff_eq!(
            infection_ln_pmf(4, 6.5, 100),
            poisson_ln_pmf(4, 6.5),
            epsilon = 1e-14
        );
        // Boundary carries the whole upper tail, so the pmf sums to one.
        let total: f64 = (0..=5).map(|y| infection_ln_pmf(y, 3.0, 5).exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(infection_ln_pmf(6, 3.0, 5), f64::NEG_INFINITY);
        assert_eq!(infection_ln_pmf(-1, 3.0, 5), f64::NEG_INFINITY);
        // No susceptibles: point mass at zero.
        assert_eq!(infection_ln_pmf(0, 3.0, 0), 0.0);
    }

    #[test]
    fn init_trajectory_starts_at_first_reported_case() {
        let mut reported = Grid::<i64>::zeros(2, 6);
        reported.set(0, 2, 7);
        reported.set(0, 4, 3);
        let traj = init_trajectory(&reported, &[1000, 1000]).unwrap();
        assert_eq!(traj.start_day(0), Some(2));
        assert_eq!(traj.start_day(1), None);
        assert_eq!(traj.y.get(0, 2), 7);
        assert_eq!(traj.infected.get(0, 2), 7);
        assert_eq!(traj.removed.get(0, 2), 0);
        assert_eq!(traj.susceptible(0, 2), 993);
        // Before the seed day everyone is susceptible.
        assert_eq!(traj.susceptible(0, 0), 1000);
    }

    #[test]
    fn simulation_conserves_population_and_evolution_identities() {
        let n_days = 80;
        let pops = vec![20_000i64, 35_000, 9_000];
        let transmission = flat_transmission(3, n_days, (0.12f64).ln());
        let mut raw_vax = Grid::<i64>::zeros(3, n_days);
        for r in 0..3 {
            for t in 30..n_days {
                raw_vax.set(r, t, 40);
            }
        }
        let mut rng = SeedTree::new(17).stream("sim", 0);
        let traj = simulate_trajectory(
            &pops,
            &[(0, 0, 5), (1, 3, 2), (2, 10, 1)],
            &transmission,
            &default_scalars(),
            &raw_vax,
            n_days,
            &mut rng,
        )
        .unwrap();

        for region in 0..3 {
            let t0 = traj.start_day(region).unwrap();
            assert!(traj.region_is_valid(region));
            for t in (t0 + 1)..n_days {
                let i_prev = traj.infected.get(region, t - 1);
                let r_prev = traj.removed.get(region, t - 1);
                assert_eq!(
                    traj.infected.get(region, t),
                    i_prev - traj.c.get(region, t) + traj.y.get(region, t)
                );
                assert_eq!(
                    traj.removed.get(region, t),
                    r_prev - traj.d.get(region, t)
                        + traj.c.get(region, t)
                        + traj.e.get(region, t)
                );
                let s = traj.susceptible(region, t);
                assert!(s >= 0);
                assert!(traj.y.get(region, t) <= traj.susceptible(region, t - 1));
            }
        }
    }

    #[test]
    fn explosive_transmission_saturates_at_susceptible_pool() {
        let n_days = 10;
        let transmission = flat_transmission(1, n_days, (50.0f64).ln());
        let raw_vax = Grid::<i64>::zeros(1, n_days);
        let mut rng = SeedTree::new(3).stream("sat", 0);
        let traj = simulate_trajectory(
            &[500],
            &[(0, 0, 5)],
            &transmission,
            &EpiScalarParams {
                removal_prob: 0.0,
                waning_prob: 0.0,
                vax_efficacy: 0.0,
                vax_lag_days: 14,
            },
            &raw_vax,
            n_days,
            &mut rng,
        )
        .unwrap();
        for t in 0..n_days {
            assert!(traj.susceptible(0, t) >= 0);
        }
        // With rate 50 per infected, the pool is gone within a few days.
        assert_eq!(traj.susceptible(0, n_days - 1), 0);
    }

    #[test]
    fn vaccination_lag_is_exact() {
        let n_days = 40;
        let mut raw_vax = Grid::<i64>::zeros(1, n_days);
        raw_vax.set(0, 3, 200);
        let transmission = flat_transmission(1, n_days, (1e-9f64).ln());
        let scalars = EpiScalarParams {
            removal_prob: 0.0,
            waning_prob: 0.0,
            vax_efficacy: 1.0,
            vax_lag_days: 14,
        };
        let mut rng = SeedTree::new(11).stream("lag", 0);
        let traj = simulate_trajectory(
            &[100_000],
            &[(0, 0, 1)],
            &transmission,
            &scalars,
            &raw_vax,
            n_days,
            &mut rng,
        )
        .unwrap();
        for t in 1..n_days {
            let expect = if t == 17 { 200 } else { 0 };
            assert_eq!(traj.e.get(0, t), expect, "day {t}");
        }
    }

    #[test]
    fn removal_residence_time_is_geometric() {
        // Cohort of one region, no new infections: infected pool decays by
        // Binomial(I, theta) per day; mean residence 1 / theta = 14 days.
        let theta = 10.0 / 140.0;
        let cohort = 200_000i64;
        let mut rng = SeedTree::new(23).stream("residence", 0);
        let mut infected = cohort;
        let mut total_days: i64 = 0;
        let mut day = 0;
        while infected > 0 && day < 3000 {
            total_days += infected; // each survivor spends this day infected
            let c = step_removals(infected, theta, &mut rng);
            infected -= c;
            day += 1;
        }
        let mean_residence = total_days as f64 / cohort as f64;
        let expect = 1.0 / theta;
        assert!(
            (mean_residence - expect).abs() / expect < 0.03,
            "mean residence {mean_residence} vs {expect}"
        );
    }

    #[test]
    fn delta_application_matches_full_recompute() {
        let n_days = 30;
        let transmission = flat_transmission(1, n_days, (0.1f64).ln());
        let raw_vax = Grid::<i64>::filled(1, n_days, 10);
        let mut rng = SeedTree::new(29).stream("delta", 0);
        let mut traj = simulate_trajectory(
            &[50_000],
            &[(0, 0, 20)],
            &transmission,
            &default_scalars(),
            &raw_vax,
            n_days,
            &mut rng,
        )
        .unwrap();

        let mut by_recompute = traj.clone();
        traj.apply_y_delta(0, 5, 3);
        traj.apply_c_delta(0, 9, -1);
        traj.apply_d_delta(0, 12, 1);
        traj.apply_e_delta(0, 20, 4);

        *by_recompute.y.row_mut(0).get_mut(5).unwrap() += 3;
        *by_recompute.c.row_mut(0).get_mut(9).unwrap() -= 1;
        *by_recompute.d.row_mut(0).get_mut(12).unwrap() += 1;
        *by_recompute.e.row_mut(0).get_mut(20).unwrap() += 4;
        by_recompute.recompute_region(0);

        assert_eq!(traj.infected, by_recompute.infected);
        assert_eq!(traj.removed, by_recompute.removed);
    }

    #[test]
    fn scalar_validation_rejects_out_of_range() {
        let mut s = default_scalars();
        s.removal_prob = 1.2;
        assert!(s.validate().is_err());
        s.removal_prob = 0.1;
        s.vax_efficacy = -0.1;
        assert!(s.validate().is_err());
    }
}
