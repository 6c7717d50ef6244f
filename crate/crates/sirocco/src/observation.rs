//! Case detection and surveillance data handling.
//!
//! Reported cases are a binomial thinning of true new infections. The
//! detection probability follows a logit-linear model in the log testing
//! rate per 100k population, with an independent Gaussian noise term per
//! (region, day). County-level test volumes and hospital admissions are
//! usually only observed as state totals; [`impute_allocation`] draws
//! county splits that honor those totals exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::graph::CountyGraph;
use crate::grid::Grid;
use crate::stats::{binomial_ln_pmf, inv_logit};

/// Scale for the testing-rate covariate: tests per 100k population.
pub const RATE_SCALE: f64 = 1e5;

/// Detection model parameters: intercept and log-test-rate slope on the
/// logit scale, plus per-cell noise.
#[derive(Debug, Clone)]
pub struct DetectionParams {
    pub intercept: f64,
    pub slope: f64,
    pub noise: Grid<f64>,
}

impl DetectionParams {
    pub fn prob(&self, region: usize, day: usize, tests: i64, population: i64) -> f64 {
        detection_prob(
            self.intercept,
            self.slope,
            log_test_rate(tests, population),
            self.noise.get(region, day),
        )
    }
}

/// Log testing rate per 100k. Zero-test days are floored at one test so the
/// covariate stays finite; input validation flags those days upstream.
#[inline]
pub fn log_test_rate(tests: i64, population: i64) -> f64 {
    debug_assert!(population > 0);
    let t = tests.max(1) as f64;
    (t / population as f64 * RATE_SCALE).ln()
}

/// logistic(intercept + slope * log_rate + noise), strictly inside (0, 1).
#[inline]
pub fn detection_prob(intercept: f64, slope: f64, log_rate: f64, noise: f64) -> f64 {
    inv_logit(intercept + slope * log_rate + noise)
}

/// log P[reported | true_count] under binomial detection. Negative infinity
/// whenever more cases are reported than exist.
#[inline]
pub fn reported_loglik(reported: i64, true_count: i64, prob: f64) -> f64 {
    binomial_ln_pmf(reported, true_count, prob)
}

/// Draws county counts summing exactly to `total`, multinomial with the
/// given non-negative weights. Sequential conditional binomials, so the
/// draw is exact and costs one binomial per county.
///
/// # Errors
///
/// Negative total, no positive weight, or a non-finite weight.
pub fn impute_allocation<R: Rng + ?Sized>(
    total: i64,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<i64>> {
    if total < 0 {
        return Err(Error::Data(format!("allocation total {total} is negative")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Data("allocation weights must be finite and non-negative".into()));
    }
    let mut tail_sums = vec![0.0; weights.len() + 1];
    for (i, &w) in weights.iter().enumerate().rev() {
        tail_sums[i] = tail_sums[i + 1] + w;
    }
    if tail_sums[0] <= 0.0 {
        return Err(Error::Data("allocation weights sum to zero".into()));
    }
    let mut out = vec![0i64; weights.len()];
    let mut remaining = total;
    for i in 0..weights.len() {
        if remaining == 0 {
            break;
        }
        if tail_sums[i + 1] <= 0.0 {
            // All remaining mass must land here (and any later positive
            // weights are absent by construction).
            out[i] = remaining;
            return Ok(out);
        }
        let p = (weights[i] / tail_sums[i]).clamp(0.0, 1.0);
        let draw = if p >= 1.0 {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(remaining as u64, p)
                .expect("validated binomial parameters")
                .sample(rng) as i64
        };
        out[i] = draw;
        remaining -= draw;
    }
    debug_assert_eq!(out.iter().sum::<i64>(), total);
    Ok(out)
}

/// Data-quality observations attached to a loaded dataset. None of these
/// stop a run; they are surfaced in validation reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataFlag {
    /// A day inside the window had no row in the source file; zero-filled.
    GapFilled { series: String, key: String },
    /// A state reported zero tests on a day with active surveillance; the
    /// detection covariate floors at one test.
    ZeroTestDay { state: String, day: usize },
    /// State test total below the summed county case reports would imply a
    /// negative test remainder. Hard error at validation; recorded here only
    /// when tolerated in simulation output checks.
    NegativeRemainder { state: String, day: usize },
    /// A source value was negative (reporting correction); clipped to zero.
    NegativeClipped { series: String, key: String },
    /// A hospital's entire catchment fell outside the region subset and the
    /// site was dropped from the run.
    HospitalDropped { hospital_id: String },
}

impl std::fmt::Display for DataFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataFlag::GapFilled { series, key } => {
                write!(f, "gap filled with zeros: {series} at {key}")
            }
            DataFlag::ZeroTestDay { state, day } => {
                write!(f, "zero tests reported: state {state} day {day}")
            }
            DataFlag::NegativeRemainder { state, day } => {
                write!(f, "county cases exceed state tests: state {state} day {day}")
            }
            DataFlag::NegativeClipped { series, key } => {
                write!(f, "negative value clipped to zero: {series} at {key}")
            }
            DataFlag::HospitalDropped { hospital_id } => {
                write!(f, "hospital dropped, catchment outside region subset: {hospital_id}")
            }
        }
    }
}

/// Everything the sampler conditions on, aligned to one (region, day)
/// window. State-level series are day-indexed vectors per state id.
#[derive(Debug, Clone)]
pub struct SurveillanceData {
    pub reported_cases: Grid<i64>,
    /// Total tests per state and day (cases plus negatives).
    pub state_tests: BTreeMap<String, Vec<i64>>,
    /// Hospital admissions per state and day, when collected.
    pub state_admissions: Option<BTreeMap<String, Vec<i64>>>,
    /// Raw vaccination doses initiated per (region, day).
    pub raw_vaccinations: Grid<i64>,
    pub flags: Vec<DataFlag>,
}

impl SurveillanceData {
    pub fn n_regions(&self) -> usize {
        self.reported_cases.n_regions()
    }

    pub fn n_days(&self) -> usize {
        self.reported_cases.n_days()
    }

    /// Cross-checks counts against the graph: shapes, non-negativity, case
    /// totals within population, and county case sums within state test
    /// totals (the test remainder must be allocatable).
    ///
    /// # Errors
    ///
    /// Names the offending state and day on the first violated cross-check.
    pub fn validate(&self, graph: &CountyGraph) -> Result<()> {
        let (n_regions, n_days) = (self.n_regions(), self.n_days());
        if graph.n_regions() != n_regions {
            return Err(Error::Data(format!(
                "surveillance covers {n_regions} regions but the graph has {}",
                graph.n_regions()
            )));
        }
        if self.raw_vaccinations.n_regions() != n_regions
            || self.raw_vaccinations.n_days() != n_days
        {
            return Err(Error::Data("vaccination grid shape mismatch".into()));
        }
        if self.reported_cases.flat().iter().any(|&v| v < 0)
            || self.raw_vaccinations.flat().iter().any(|&v| v < 0)
        {
            return Err(Error::Data("negative counts in surveillance grids".into()));
        }
        for r in 0..n_regions {
            let total: i64 = self.reported_cases.row(r).iter().sum();
            if total > graph.population(r) as i64 {
                return Err(Error::Data(format!(
                    "region '{}' reports more cases than residents",
                    graph.region_id(r)
                )));
            }
        }
        let groups = graph.state_groups();
        for (state, series) in &self.state_tests {
            let members = groups
                .get(state)
                .ok_or_else(|| Error::Data(format!("test series for unknown state '{state}'")))?;
            if series.len() != n_days {
                return Err(Error::Data(format!(
                    "state '{state}' test series has {} days, window has {n_days}",
                    series.len()
                )));
            }
            for (day, &tests) in series.iter().enumerate() {
                if tests < 0 {
                    return Err(Error::Data(format!(
                        "state '{state}' day {day}: negative test count"
                    )));
                }
                let cases: i64 = members
                    .iter()
                    .map(|&r| self.reported_cases.get(r, day))
                    .sum();
                if cases > tests {
                    return Err(Error::Data(format!(
                        "state '{state}' day {day}: county case sum {cases} exceeds state test total {tests}"
                    )));
                }
            }
        }
        if let Some(adm) = &self.state_admissions {
            for (state, series) in adm {
                if !groups.contains_key(state) {
                    return Err(Error::Data(format!(
                        "admission series for unknown state '{state}'"
                    )));
                }
                if series.len() != n_days {
                    return Err(Error::Data(format!(
                        "state '{state}' admission series length mismatch"
                    )));
                }
                if series.iter().any(|&v| v < 0) {
                    return Err(Error::Data(format!(
                        "state '{state}': negative admission count"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shapes;
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;

    #[test]
    fn detection_matches_pinned_example() {
        // intercept -2, slope 0.5, 1000 tests in a population of 100k:
        // rate = 1000 per 100k, logit = -2 + 0.5 ln(1000) = 1.45388,
        // probability 0.8105.
        let lr = log_test_rate(1000, 100_000);
        assert_abs_diff_eq!(lr, (1000.0f64).ln(), epsilon = 1e-12);
        let logit = -2.0 + 0.5 * lr;
        assert_abs_diff_eq!(logit, 1.4539, epsilon = 1e-4);
        let p = detection_prob(-2.0, 0.5, lr, 0.0);
        assert_abs_diff_eq!(p, 1.0 / (1.0 + (-logit).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.8105, epsilon = 1e-3);
    }

    #[test]
    fn zero_test_days_floor_at_one_test() {
        let with_zero = log_test_rate(0, 50_000);
        let with_one = log_test_rate(1, 50_000);
        assert_eq!(with_zero, with_one);
        assert!(with_zero.is_finite());
    }

    #[test]
    fn reported_loglik_matches_pinned_example() {
        // Binomial(10, 0.5) at 3: ln C(10,3) - 10 ln 2 = ln 120 - 6.9315
        // = -2.14398.
        let expect = (120.0f64).ln() - 10.0 * (2.0f64).ln();
        assert_abs_diff_eq!(reported_loglik(3, 10, 0.5), expect, epsilon = 1e-10);
        assert_abs_diff_eq!(reported_loglik(3, 10, 0.5), -2.144, epsilon = 1e-3);
        assert_eq!(reported_loglik(11, 10, 0.5), f64::NEG_INFINITY);
    }

    #[test]
    fn allocation_sums_exactly_and_tracks_weights() {
        let mut rng = SeedTree::new(41).stream("alloc", 0);
        let weights = [0.5, 0.3, 0.2];
        let mut means = [0.0f64; 3];
        let reps = 4000;
        for _ in 0..reps {
            let v = impute_allocation(100, &weights, &mut rng).unwrap();
            assert_eq!(v.iter().sum::<i64>(), 100);
            assert!(v.iter().all(|&x| x >= 0));
            for (m, x) in means.iter_mut().zip(&v) {
                *m += *x as f64;
            }
        }
        for (m, w) in means.iter().zip(&weights) {
            let mean = m / reps as f64;
            let expect = 100.0 * w;
            // Binomial sd per draw is < 5; the mean over 4000 draws is tight.
            assert!(
                (mean - expect).abs() < 0.4,
                "allocation mean {mean} vs expected {expect}"
            );
        }
    }

    #[test]
    fn allocation_edge_cases() {
        let mut rng = SeedTree::new(2).stream("alloc-edge", 0);
        assert_eq!(
            impute_allocation(0, &[1.0, 2.0], &mut rng).unwrap(),
            vec![0, 0]
        );
        assert_eq!(impute_allocation(7, &[3.0], &mut rng).unwrap(), vec![7]);
        let v = impute_allocation(9, &[0.0, 1.0, 0.0], &mut rng).unwrap();
        assert_eq!(v, vec![0, 9, 0]);
        assert!(impute_allocation(-1, &[1.0], &mut rng).is_err());
        assert!(impute_allocation(5, &[0.0, 0.0], &mut rng).is_err());
        assert!(impute_allocation(5, &[f64::NAN, 1.0], &mut rng).is_err());
    }

    fn small_data(graph: &CountyGraph) -> SurveillanceData {
        let n = graph.n_regions();
        let mut cases = Grid::<i64>::zeros(n, 4);
        cases.set(0, 1, 3);
        cases.set(1, 2, 5);
        let mut tests = BTreeMap::new();
        tests.insert("00".to_string(), vec![10, 10, 10, 10]);
        SurveillanceData {
            reported_cases: cases,
            state_tests: tests,
            state_admissions: None,
            raw_vaccinations: Grid::zeros(n, 4),
            flags: Vec::new(),
        }
    }

    #[test]
    fn validation_accepts_consistent_data() {
        let g = shapes::path(3);
        assert!(small_data(&g).validate(&g).is_ok());
    }

    #[test]
    fn validation_names_day_when_cases_exceed_tests() {
        let g = shapes::path(3);
        let mut d = small_data(&g);
        d.reported_cases.set(0, 2, 40);
        let err = d.validate(&g).unwrap_err().to_string();
        assert!(err.contains("day 2"), "{err}");
        assert!(err.contains("state '00'"), "{err}");
    }

    #[test]
    fn validation_rejects_negative_and_misshapen_series() {
        let g = shapes::path(3);
        let mut d = small_data(&g);
        d.reported_cases.set(0, 0, -1);
        assert!(d.validate(&g).is_err());

        let mut d = small_data(&g);
        d.state_tests.insert("00".into(), vec![10, 10]);
        assert!(d.validate(&g).is_err());

        let mut d = small_data(&g);
        d.state_tests.insert("ZZ".into(), vec![0; 4]);
        assert!(d.validate(&g).is_err());
    }
}
