//! Immutable calibration inputs: graph, surveillance series, covariates,
//! hospital descriptions, and the index structures every update reuses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::CountyGraph;
use crate::grid::Grid;
use crate::hospital::HospitalConfig;
use crate::observation::SurveillanceData;

/// One covariate series over (region, day). Covariates with regional random
/// effects get a CAR field of coefficients; fixed-effect covariates get one
/// scalar coefficient.
#[derive(Debug, Clone)]
pub struct Covariate {
    pub id: String,
    pub values: Grid<f64>,
}

/// Observed within-hospital daily transition counts for one site, when a
/// deployment has them. Each day's floor pool splits into (stayed, moved to
/// ICU, discharged) and the ICU pool into (moved to floor, stayed,
/// discharged).
#[derive(Debug, Clone)]
pub struct FlowObservation {
    pub site: usize,
    pub floor_moves: Vec<[i64; 3]>,
    pub icu_moves: Vec<[i64; 3]>,
}

/// Non-prior knobs of the model structure.
#[derive(Debug, Clone)]
pub struct ContextOptions {
    /// Days between a reported vaccination and its immunological effect.
    pub vax_lag_days: usize,
}

impl Default for ContextOptions {
    fn default() -> Self {
        ContextOptions { vax_lag_days: 14 }
    }
}

/// Everything the sampler conditions on. Construction validates the data
/// against the graph and precomputes the state-level index maps and
/// negative-test totals the imputation steps allocate against.
#[derive(Debug)]
pub struct ModelContext {
    pub graph: CountyGraph,
    pub data: SurveillanceData,
    pub random_covariates: Vec<Covariate>,
    pub fixed_covariates: Vec<Covariate>,
    pub hospital_configs: Vec<HospitalConfig>,
    pub flow_observations: Vec<FlowObservation>,
    pub options: ContextOptions,
    /// First day with a reported case, per region; `None` never activates.
    pub start_days: Vec<Option<usize>>,
    pub state_regions: BTreeMap<String, Vec<usize>>,
    /// Per (state, day): state test total minus reported cases, the count of
    /// negative tests the county test volumes must sum to.
    pub negative_tests: BTreeMap<String, Vec<i64>>,
}

impl ModelContext {
    pub fn new(
        graph: CountyGraph,
        data: SurveillanceData,
        random_covariates: Vec<Covariate>,
        fixed_covariates: Vec<Covariate>,
        hospital_configs: Vec<HospitalConfig>,
        flow_observations: Vec<FlowObservation>,
        options: ContextOptions,
    ) -> Result<ModelContext> {
        data.validate(&graph)?;
        let n_regions = graph.n_regions();
        let n_days = data.n_days();

        for cov in random_covariates.iter().chain(&fixed_covariates) {
            if cov.values.n_regions() != n_regions || cov.values.n_days() != n_days {
                return Err(Error::Data(format!(
                    "covariate '{}' shape disagrees with the surveillance window",
                    cov.id
                )));
            }
            if cov.values.flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "covariate '{}' contains non-finite values",
                    cov.id
                )));
            }
        }

        let start_days: Vec<Option<usize>> = (0..n_regions)
            .map(|r| data.reported_cases.row(r).iter().position(|&v| v > 0))
            .collect();
        let state_regions = graph.state_groups();

        let mut negative_tests = BTreeMap::new();
        for (state, regions) in &state_regions {
            let totals = data.state_tests.get(state).ok_or_else(|| {
                Error::Data(format!("no test series for state '{state}'"))
            })?;
            let series: Vec<i64> = (0..n_days)
                .map(|t| totals[t] - data.reported_cases.sum_over(regions, t))
                .collect();
            // validate() already enforces county sums <= state totals.
            debug_assert!(series.iter().all(|&v| v >= 0));
            negative_tests.insert(state.clone(), series);
        }

        // Admissions cannot precede the first infection anywhere in the
        // state: the admission rate is proportional to the infected count.
        if let Some(adm) = &data.state_admissions {
            for (state, series) in adm {
                let regions = state_regions.get(state).ok_or_else(|| {
                    Error::Data(format!("admission series for unknown state '{state}'"))
                })?;
                let first_case = regions
                    .iter()
                    .filter_map(|&r| start_days[r])
                    .min()
                    .unwrap_or(n_days);
                if let Some(day) = series[..first_case.min(n_days)]
                    .iter()
                    .position(|&v| v > 0)
                {
                    return Err(Error::Data(format!(
                        "state '{state}' reports admissions on day {day}, before its \
                         first reported case on day {first_case}"
                    )));
                }
            }
        }

        for config in &hospital_configs {
            config.validate()?;
            for county in config.catchment.keys() {
                if graph.index_of(county).is_none() {
                    return Err(Error::Data(format!(
                        "hospital '{}': catchment names unknown region '{county}'",
                        config.hospital_id
                    )));
                }
            }
        }
        for obs in &flow_observations {
            if obs.site >= hospital_configs.len() {
                return Err(Error::Data(format!(
                    "flow observation references hospital index {} of {}",
                    obs.site,
                    hospital_configs.len()
                )));
            }
            if obs.floor_moves.iter().chain(&obs.icu_moves).any(|m| m.iter().any(|&c| c < 0)) {
                return Err(Error::Data("negative flow counts".into()));
            }
        }

        Ok(ModelContext {
            graph,
            data,
            random_covariates,
            fixed_covariates,
            hospital_configs,
            flow_observations,
            options,
            start_days,
            state_regions,
            negative_tests,
        })
    }

    /// Context with surveillance data only: no covariates, no hospitals.
    pub fn from_data(graph: CountyGraph, data: SurveillanceData) -> Result<ModelContext> {
        ModelContext::new(
            graph,
            data,
            Vec::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
            ContextOptions::default(),
        )
    }

    pub fn n_regions(&self) -> usize {
        self.graph.n_regions()
    }

    pub fn n_days(&self) -> usize {
        self.data.n_days()
    }

    pub fn populations(&self) -> Vec<i64> {
        (0..self.graph.n_regions())
            .map(|r| self.graph.population(r) as i64)
            .collect()
    }

    /// Whether admission counts are part of the latent state.
    pub fn has_admissions(&self) -> bool {
        self.data.state_admissions.is_some()
    }

    /// Raw vaccination count whose effect lands on `day`, zero before the
    /// series provides one.
    pub fn lagged_vax(&self, region: usize, day: usize) -> i64 {
        day.checked_sub(self.options.vax_lag_days)
            .map(|src| self.data.raw_vaccinations.get(region, src))
            .unwrap_or(0)
    }
}
