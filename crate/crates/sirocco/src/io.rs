//! Run configuration, dataset loading and validation, draw-file
//! persistence, and the artifacts the command-line tools write.
//!
//! Everything here is deterministic: no timestamps, no hash-map iteration
//! order, and draw files identified by a config fingerprint so artifacts
//! from different configurations never silently mix in one directory.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read as _, Seek, SeekFrom, Write as _};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epi::{simulate_trajectory, EpiScalarParams, TransmissionField};
use crate::error::{Error, Result};
use crate::forecast::{
    poisson_draw, ForecastConfig, ForecastSummary, RampSchedule, SaturationPrior, SummaryOptions,
    VaxOptions,
};
use crate::graph::{load_graph, CountyGraph};
use crate::grid::Grid;
use crate::hospital::{draw_admissions, Capacity, HospitalConfig, TransitionMatrix};
use crate::inference::params::SpaceTimeHypers;
use crate::inference::{
    flat_len, ContextOptions, Covariate, DrawSink, FlowObservation, McmcConfig, McmcRun,
    ModelContext, ParameterSet,
};
use crate::observation::{log_test_rate, DataFlag, SurveillanceData};
use crate::rng::SeedTree;
use crate::stats::{binomial_draw, inv_logit};

pub const RUN_METADATA_FILE: &str = "run_metadata.json";
pub const FORECAST_METADATA_FILE: &str = "forecast_metadata.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const TRUE_PARAMS_FILE: &str = "true_params.json";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Full description of one run: where the data lives, the sampler and
/// forecast settings, and the root seed every random stream derives from.
///
/// Loaded from TOML; every section is optional except `data`. Relative
/// paths resolve against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Optional region subset; rows for other known regions are skipped.
    #[serde(default)]
    pub regions: Option<Vec<String>>,
    pub data: DataPaths,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub vaccination: VaxSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub adjacency: PathBuf,
    pub regions: PathBuf,
    pub cases: PathBuf,
    pub tests: PathBuf,
    pub vaccinations: PathBuf,
    #[serde(default)]
    pub admissions: Option<PathBuf>,
    #[serde(default)]
    pub hospitals: Option<PathBuf>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateEffect {
    /// Per-region random slope drawn around a common mean.
    Regional,
    /// One shared fixed coefficient.
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub id: String,
    pub path: PathBuf,
    #[serde(default = "default_covariate_effect")]
    pub effect: CovariateEffect,
}

fn default_covariate_effect() -> CovariateEffect {
    CovariateEffect::Regional
}

/// Sampler settings. The seed lives at the top level of the config so one
/// root value governs calibration, simulation, and forecasting alike.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSection {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    pub block_width: usize,
    pub latent_step: i64,
    pub prior_only: bool,
    pub audit_interval: u64,
}

impl Default for McmcSection {
    fn default() -> Self {
        let base = McmcConfig::default();
        McmcSection {
            iterations: base.iterations,
            burn_in: base.burn_in,
            thin: base.thin,
            chains: base.chains,
            block_width: base.block_width,
            latent_step: base.latent_step,
            prior_only: base.prior_only,
            audit_interval: base.audit_interval,
        }
    }
}

impl McmcSection {
    pub fn to_config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            chains: self.chains,
            seed,
            block_width: self.block_width,
            latent_step: self.latent_step,
            prior_only: self.prior_only,
            audit_interval: self.audit_interval,
        }
    }
}

fn default_levels() -> Vec<f64> {
    vec![0.05, 0.25, 0.5, 0.75, 0.95]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSection {
    pub horizon: usize,
    pub replicates_per_draw: usize,
    pub draw_stride: usize,
    pub levels: Vec<f64>,
    pub max_spaghetti: usize,
    /// ICU exceedance is reported against this fraction of each capacity.
    pub icu_threshold: f64,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            horizon: 28,
            replicates_per_draw: 1,
            draw_stride: 1,
            levels: default_levels(),
            max_spaghetti: 10,
            icu_threshold: 1.0,
        }
    }
}

/// Vaccination schedule and saturation settings, expressed in calendar
/// dates so the same config works for any data window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaxSection {
    pub ramp_start_date: String,
    pub plateau_date: String,
    pub lag_days: usize,
    pub saturation_lower: f64,
    pub saturation_upper: f64,
    pub saturation_alpha: f64,
    pub saturation_beta: f64,
    pub wiggle_tau: f64,
    pub wiggle_rho_s: f64,
    pub wiggle_rho_t: f64,
}

impl Default for VaxSection {
    fn default() -> Self {
        VaxSection {
            ramp_start_date: "2021-01-01".to_string(),
            plateau_date: "2021-03-14".to_string(),
            lag_days: 14,
            saturation_lower: 0.50,
            saturation_upper: 0.75,
            saturation_alpha: 4.0,
            saturation_beta: 6.0,
            wiggle_tau: 25.0,
            wiggle_rho_s: 0.3,
            wiggle_rho_t: 0.9,
        }
    }
}

impl VaxSection {
    /// Dose ramp in day offsets relative to the data window start. Offsets
    /// may be negative (ramp began before the window) or beyond its end.
    pub fn ramp(&self, window_start: NaiveDate) -> Result<RampSchedule> {
        let ramp_start = parse_config_date(&self.ramp_start_date, "vaccination.ramp_start_date")?;
        let plateau = parse_config_date(&self.plateau_date, "vaccination.plateau_date")?;
        let schedule = RampSchedule {
            ramp_start: (ramp_start - window_start).num_days(),
            plateau_start: (plateau - window_start).num_days(),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn saturation(&self) -> SaturationPrior {
        SaturationPrior {
            lower: self.saturation_lower,
            upper: self.saturation_upper,
            alpha: self.saturation_alpha,
            beta: self.saturation_beta,
        }
    }

    pub fn options(&self, window_start: NaiveDate) -> Result<VaxOptions> {
        let opts = VaxOptions {
            ramp: self.ramp(window_start)?,
            wiggle_hypers: SpaceTimeHypers {
                tau: self.wiggle_tau,
                rho_s: self.wiggle_rho_s,
                rho_t: self.wiggle_rho_t,
            },
            saturation: self.saturation(),
        };
        opts.saturation.validate()?;
        Ok(opts)
    }
}

/// Settings for synthetic dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    pub start_date: String,
    pub n_days: usize,
    /// Infections seeded in every region on the first day.
    pub seed_cases: i64,
    pub daily_state_tests: i64,
    pub transmission_log_mean: f64,
    pub detection_intercept: f64,
    pub detection_slope: f64,
    /// Doses initiated per region per day at full ramp.
    pub dose_plateau: f64,
    pub admission_log_rate: f64,
    pub with_admissions: bool,
    /// Degenerate mode: transmission is forced to zero so nothing spreads
    /// past the seeds. Used to exercise the no-signal path end to end.
    pub zero_transmission: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            start_date: "2020-06-01".to_string(),
            n_days: 80,
            seed_cases: 2,
            daily_state_tests: 2000,
            transmission_log_mean: -2.3,
            detection_intercept: -2.5,
            detection_slope: 0.3,
            dose_plateau: 40.0,
            admission_log_rate: -4.0,
            with_admissions: true,
            zero_transmission: false,
        }
    }
}

impl RunConfig {
    /// Reads and validates a TOML run configuration. A missing or
    /// unparsable file is a usage error, not a runtime failure.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config '{}': {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Rebases every relative path onto `base` (the config directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.output_dir);
        resolve(&mut self.data.adjacency);
        resolve(&mut self.data.regions);
        resolve(&mut self.data.cases);
        resolve(&mut self.data.tests);
        resolve(&mut self.data.vaccinations);
        if let Some(p) = &mut self.data.admissions {
            resolve(p);
        }
        if let Some(p) = &mut self.data.hospitals {
            resolve(p);
        }
        for cov in &mut self.data.covariates {
            resolve(&mut cov.path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.to_config(self.seed).validate()?;
        let f = &self.forecast;
        if f.horizon == 0 {
            return Err(Error::Config("forecast.horizon must be positive".into()));
        }
        if f.replicates_per_draw == 0 || f.draw_stride == 0 {
            return Err(Error::Config(
                "forecast.replicates_per_draw and draw_stride must be positive".into(),
            ));
        }
        if f.levels.is_empty() {
            return Err(Error::Config("forecast.levels must not be empty".into()));
        }
        for &level in &f.levels {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::Config(format!(
                    "forecast level {level} outside (0, 1)"
                )));
            }
        }
        if !(f.icu_threshold > 0.0) {
            return Err(Error::Config("forecast.icu_threshold must be positive".into()));
        }
        // Date fields must parse and be ordered; day offsets themselves
        // depend on the data window and are checked again at use.
        let ramp_start =
            parse_config_date(&self.vaccination.ramp_start_date, "vaccination.ramp_start_date")?;
        let plateau = parse_config_date(&self.vaccination.plateau_date, "vaccination.plateau_date")?;
        if plateau <= ramp_start {
            return Err(Error::Config(
                "vaccination.plateau_date must fall after ramp_start_date".into(),
            ));
        }
        self.vaccination.saturation().validate()?;
        let sim = &self.simulate;
        parse_config_date(&sim.start_date, "simulate.start_date")?;
        if sim.n_days == 0 {
            return Err(Error::Config("simulate.n_days must be positive".into()));
        }
        if sim.seed_cases < 1 {
            return Err(Error::Config("simulate.seed_cases must be at least 1".into()));
        }
        if sim.daily_state_tests < 0 {
            return Err(Error::Config("simulate.daily_state_tests must be non-negative".into()));
        }
        if !(sim.dose_plateau >= 0.0) {
            return Err(Error::Config("simulate.dose_plateau must be non-negative".into()));
        }
        let mut seen = HashSet::new();
        for cov in &self.data.covariates {
            if !seen.insert(cov.id.clone()) {
                return Err(Error::Config(format!("duplicate covariate id '{}'", cov.id)));
            }
        }
        Ok(())
    }

    /// Forward-simulation settings assembled from the forecast and
    /// vaccination sections, anchored to the data window start.
    pub fn forecast_config(&self, window_start: NaiveDate) -> Result<ForecastConfig> {
        let mut cfg = ForecastConfig::new(self.forecast.horizon);
        cfg.replicates_per_draw = self.forecast.replicates_per_draw;
        cfg.draw_stride = self.forecast.draw_stride;
        cfg.vax = self.vaccination.options(window_start)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn summary_options(&self) -> SummaryOptions {
        let mut levels = self.forecast.levels.clone();
        levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
        levels.dedup();
        SummaryOptions {
            levels,
            max_spaghetti: self.forecast.max_spaghetti,
        }
    }
}

fn parse_config_date(raw: &str, field: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|e| Error::Config(format!("{field}: '{raw}' is not an ISO date: {e}")))
}

// ---------------------------------------------------------------------------
// Config fingerprint
// ---------------------------------------------------------------------------

/// The slice of the config that determines posterior draws. Forecast and
/// output settings are deliberately excluded: changing a horizon or a
/// quantile level must not orphan an existing draw file.
#[derive(Serialize)]
struct FingerprintView<'a> {
    seed: u64,
    regions: &'a Option<Vec<String>>,
    mcmc: &'a McmcSection,
    vaccination: &'a VaxSection,
    data_hash: &'a str,
}

/// Short hex fingerprint over the calibration-relevant config plus the
/// content hash of the loaded dataset.
pub fn config_fingerprint(config: &RunConfig, data_hash: &str) -> String {
    let view = FingerprintView {
        seed: config.seed,
        regions: &config.regions,
        mcmc: &config.mcmc,
        vaccination: &config.vaccination,
        data_hash,
    };
    let bytes = serde_json::to_vec(&view).expect("fingerprint view serializes");
    let digest = Sha256::digest(&bytes);
    hex_string(&digest)[..16].to_string()
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

pub fn date_of(window_start: NaiveDate, day: usize) -> NaiveDate {
    window_start + chrono::Duration::days(day as i64)
}

// ---------------------------------------------------------------------------
// Dataset loading and validation
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ValidatedInputs {
    pub ctx: ModelContext,
    pub window_start: NaiveDate,
    pub data_hash: String,
    pub fingerprint: String,
}

/// Loads every input named by the config, aligns the series to the case
/// window, and cross-checks them. The returned context is ready for
/// calibration; `flags` on its data record every repair that was applied.
pub fn validate_inputs(config: &RunConfig) -> Result<ValidatedInputs> {
    let (graph, known_regions) = load_run_graph(config)?;
    let known_states: HashSet<String> = graph
        .state_groups()
        .keys()
        .cloned()
        .collect();
    let mut flags = Vec::new();

    let (reported_cases, window_start) =
        load_cases(&config.data.cases, &graph, &known_regions, &mut flags)?;
    let n_days = reported_cases.n_days();

    let region_status = |id: &str| -> KeyStatus {
        match graph.index_of(id) {
            Some(_) => KeyStatus::Keep,
            None if known_regions.contains(id) => KeyStatus::Skip,
            None => KeyStatus::Unknown,
        }
    };
    // State series for filtered-out states are skipped only when no kept
    // region belongs to them; unknown state ids are always an error.
    let state_status = |id: &str| -> KeyStatus {
        if known_states.contains(id) {
            KeyStatus::Keep
        } else {
            KeyStatus::Skip
        }
    };

    let state_tests = load_i64_series(
        &config.data.tests,
        "tests",
        "state",
        &["state_id", "date", "total_tests"],
        window_start,
        n_days,
        &state_status,
        &mut flags,
    )?;
    for state in &known_states {
        if !state_tests.contains_key(state) {
            return Err(Error::Data(format!(
                "'{}': no test rows for state '{state}'",
                config.data.tests.display()
            )));
        }
    }
    for (state, series) in &state_tests {
        for (day, &v) in series.iter().enumerate() {
            if v == 0 {
                flags.push(DataFlag::ZeroTestDay {
                    state: state.clone(),
                    day,
                });
            }
        }
    }

    // County case totals must fit inside the state test totals; the
    // remainder is the negative-test volume allocated during calibration.
    let state_regions = graph.state_groups();
    for (state, regions) in &state_regions {
        let tests = &state_tests[state];
        for day in 0..n_days {
            let case_sum = reported_cases.sum_over(regions, day);
            if case_sum > tests[day] {
                return Err(Error::Data(format!(
                    "state '{state}' on {}: county case total {case_sum} exceeds \
                     reported tests {}",
                    date_of(window_start, day),
                    tests[day]
                )));
            }
        }
    }

    let state_admissions = match &config.data.admissions {
        Some(path) => {
            let adm = load_i64_series(
                path,
                "admissions",
                "state",
                &["state_id", "date", "admissions"],
                window_start,
                n_days,
                &state_status,
                &mut flags,
            )?;
            for state in &known_states {
                if !adm.contains_key(state) {
                    return Err(Error::Data(format!(
                        "'{}': no admission rows for state '{state}'",
                        path.display()
                    )));
                }
            }
            Some(adm)
        }
        None => None,
    };

    let vax_map = load_i64_series(
        &config.data.vaccinations,
        "vaccinations",
        "region",
        &["region_id", "date", "doses_initiated"],
        window_start,
        n_days,
        &region_status,
        &mut flags,
    )?;
    let mut raw_vaccinations = Grid::zeros(graph.n_regions(), n_days);
    for r in 0..graph.n_regions() {
        let id = graph.region_id(r);
        if let Some(series) = vax_map.get(id) {
            for (day, &v) in series.iter().enumerate() {
                raw_vaccinations.set(r, day, v);
            }
        } else {
            // A region with no dose rows at all is an unvaccinated county,
            // not an error; record the gap once.
            flags.push(DataFlag::GapFilled {
                series: "vaccinations".to_string(),
                key: format!("{id} ({n_days} days)"),
            });
        }
    }

    let mut random_covariates = Vec::new();
    let mut fixed_covariates = Vec::new();
    for spec in &config.data.covariates {
        let values = load_covariate_grid(spec, &graph, window_start, n_days, &region_status, &mut flags)?;
        let cov = Covariate {
            id: spec.id.clone(),
            values,
        };
        match spec.effect {
            CovariateEffect::Regional => random_covariates.push(cov),
            CovariateEffect::Fixed => fixed_covariates.push(cov),
        }
    }

    let (hospital_configs, flow_observations) = match &config.data.hospitals {
        Some(path) => load_hospitals(path, &graph, &known_regions, &mut flags)?,
        None => (Vec::new(), Vec::new()),
    };

    let data = SurveillanceData {
        reported_cases,
        state_tests,
        state_admissions,
        raw_vaccinations,
        flags,
    };
    let data_hash = dataset_hash(
        window_start,
        &graph,
        &data,
        &random_covariates,
        &fixed_covariates,
        &hospital_configs,
        &flow_observations,
    );
    let fingerprint = config_fingerprint(config, &data_hash);

    let options = ContextOptions {
        vax_lag_days: config.vaccination.lag_days,
    };
    let ctx = ModelContext::new(
        graph,
        data,
        random_covariates,
        fixed_covariates,
        hospital_configs,
        flow_observations,
        options,
    )?;
    Ok(ValidatedInputs {
        ctx,
        window_start,
        data_hash,
        fingerprint,
    })
}

fn load_run_graph(config: &RunConfig) -> Result<(CountyGraph, HashSet<String>)> {
    let full = load_graph(&config.data.adjacency, &config.data.regions)?;
    let known: HashSet<String> = full.region_ids().iter().cloned().collect();
    let graph = match &config.regions {
        Some(keep) => full.induced_subgraph(keep)?,
        None => full,
    };
    Ok((graph, known))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum KeyStatus {
    Keep,
    /// Known entity excluded by the region subset; rows ignored.
    Skip,
    Unknown,
}

/// Reads a CSV and returns its rows with columns reordered to `expected`.
/// The header must contain exactly the expected column names.
fn read_csv_exact(path: &Path, expected: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open '{}': {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(str::to_string)
        .collect();
    let mut found_sorted = headers.clone();
    found_sorted.sort();
    let mut expected_sorted: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
    expected_sorted.sort();
    if found_sorted != expected_sorted {
        return Err(Error::Data(format!(
            "'{}': expected columns {:?}, found {:?}",
            path.display(),
            expected,
            headers
        )));
    }
    let idx: Vec<usize> = expected
        .iter()
        .map(|e| headers.iter().position(|h| h == e).expect("checked above"))
        .collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push(
            idx.iter()
                .map(|&i| record.get(i).unwrap_or("").to_string())
                .collect(),
        );
    }
    Ok(rows)
}

fn parse_row_date(raw: &str, path: &Path) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|e| {
        Error::Data(format!(
            "'{}': '{raw}' is not an ISO date: {e}",
            path.display()
        ))
    })
}

fn parse_row_i64(raw: &str, path: &Path) -> Result<i64> {
    raw.parse::<i64>().map_err(|e| {
        Error::Data(format!(
            "'{}': '{raw}' is not an integer: {e}",
            path.display()
        ))
    })
}

/// Loads the case file and derives the data window from its date span.
/// Missing (region, day) cells inside the window are zero-filled and
/// flagged; negative counts are clipped to zero and flagged.
fn load_cases(
    path: &Path,
    graph: &CountyGraph,
    known_regions: &HashSet<String>,
    flags: &mut Vec<DataFlag>,
) -> Result<(Grid<i64>, NaiveDate)> {
    let rows = read_csv_exact(path, &["region_id", "date", "new_cases"])?;
    let mut parsed: Vec<(usize, NaiveDate, i64)> = Vec::new();
    for row in &rows {
        let id = row[0].as_str();
        let region = match graph.index_of(id) {
            Some(r) => r,
            None if known_regions.contains(id) => continue,
            None => {
                return Err(Error::Data(format!(
                    "'{}': unknown region '{id}'",
                    path.display()
                )))
            }
        };
        let date = parse_row_date(&row[1], path)?;
        let value = parse_row_i64(&row[2], path)?;
        parsed.push((region, date, value));
    }
    if parsed.is_empty() {
        return Err(Error::Data(format!(
            "'{}': no case rows for the configured regions",
            path.display()
        )));
    }
    let window_start = parsed.iter().map(|&(_, d, _)| d).min().expect("non-empty");
    let window_end = parsed.iter().map(|&(_, d, _)| d).max().expect("non-empty");
    let n_days = (window_end - window_start).num_days() as usize + 1;

    let mut cells: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    for (region, date, value) in parsed {
        let day = (date - window_start).num_days() as usize;
        if cells.insert((region, day), value).is_some() {
            return Err(Error::Data(format!(
                "'{}': duplicate row for region '{}' on {date}",
                path.display(),
                graph.region_id(region)
            )));
        }
    }

    let mut grid = Grid::zeros(graph.n_regions(), n_days);
    for r in 0..graph.n_regions() {
        let mut missing = 0usize;
        for day in 0..n_days {
            match cells.get(&(r, day)) {
                Some(&v) if v < 0 => {
                    flags.push(DataFlag::NegativeClipped {
                        series: "cases".to_string(),
                        key: format!("{} {}", graph.region_id(r), date_of(window_start, day)),
                    });
                }
                Some(&v) => grid.set(r, day, v),
                None => missing += 1,
            }
        }
        if missing > 0 {
            flags.push(DataFlag::GapFilled {
                series: "cases".to_string(),
                key: format!("{} ({missing} days)", graph.region_id(r)),
            });
        }
    }
    Ok((grid, window_start))
}

/// Loads a keyed daily count series aligned to the window. Shared by the
/// test, admission, and vaccination loaders; rows dated outside the window
/// are ignored so wider exports need no trimming.
#[allow(clippy::too_many_arguments)]
fn load_i64_series(
    path: &Path,
    series_name: &str,
    key_kind: &str,
    columns: &[&str; 3],
    window_start: NaiveDate,
    n_days: usize,
    status: &dyn Fn(&str) -> KeyStatus,
    flags: &mut Vec<DataFlag>,
) -> Result<BTreeMap<String, Vec<i64>>> {
    let rows = read_csv_exact(path, columns)?;
    let mut cells: BTreeMap<String, BTreeMap<usize, i64>> = BTreeMap::new();
    for row in &rows {
        let id = row[0].as_str();
        match status(id) {
            KeyStatus::Keep => {}
            KeyStatus::Skip => continue,
            KeyStatus::Unknown => {
                return Err(Error::Data(format!(
                    "'{}': unknown {key_kind} '{id}'",
                    path.display()
                )))
            }
        }
        let date = parse_row_date(&row[1], path)?;
        let value = parse_row_i64(&row[2], path)?;
        let offset = (date - window_start).num_days();
        if offset < 0 || offset >= n_days as i64 {
            continue;
        }
        if cells
            .entry(id.to_string())
            .or_default()
            .insert(offset as usize, value)
            .is_some()
        {
            return Err(Error::Data(format!(
                "'{}': duplicate row for {key_kind} '{id}' on {date}",
                path.display()
            )));
        }
    }

    let mut out = BTreeMap::new();
    for (id, days) in cells {
        let mut series = vec![0i64; n_days];
        let mut missing = 0usize;
        for (day, slot) in series.iter_mut().enumerate() {
            match days.get(&day) {
                Some(&v) if v < 0 => {
                    flags.push(DataFlag::NegativeClipped {
                        series: series_name.to_string(),
                        key: format!("{id} {}", date_of(window_start, day)),
                    });
                }
                Some(&v) => *slot = v,
                None => missing += 1,
            }
        }
        if missing > 0 {
            flags.push(DataFlag::GapFilled {
                series: series_name.to_string(),
                key: format!("{id} ({missing} days)"),
            });
        }
        out.insert(id, series);
    }
    Ok(out)
}

/// Loads one covariate as a (region, day) grid of finite values. Gaps are
/// zero-filled and flagged; values are taken as-is otherwise, so any
/// centering or scaling happens upstream of the file.
fn load_covariate_grid(
    spec: &CovariateSpec,
    graph: &CountyGraph,
    window_start: NaiveDate,
    n_days: usize,
    status: &dyn Fn(&str) -> KeyStatus,
    flags: &mut Vec<DataFlag>,
) -> Result<Grid<f64>> {
    let rows = read_csv_exact(&spec.path, &["region_id", "date", "value"])?;
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for row in &rows {
        let id = row[0].as_str();
        match status(id) {
            KeyStatus::Keep => {}
            KeyStatus::Skip => continue,
            KeyStatus::Unknown => {
                return Err(Error::Data(format!(
                    "'{}': unknown region '{id}'",
                    spec.path.display()
                )))
            }
        }
        let region = graph.index_of(id).expect("kept key");
        let date = parse_row_date(&row[1], &spec.path)?;
        let value: f64 = row[2].parse().map_err(|e| {
            Error::Data(format!(
                "'{}': '{}' is not a number: {e}",
                spec.path.display(),
                row[2]
            ))
        })?;
        if !value.is_finite() {
            return Err(Error::Data(format!(
                "'{}': non-finite value for region '{id}' on {date}",
                spec.path.display()
            )));
        }
        let offset = (date - window_start).num_days();
        if offset < 0 || offset >= n_days as i64 {
            continue;
        }
        if cells.insert((region, offset as usize), value).is_some() {
            return Err(Error::Data(format!(
                "'{}': duplicate row for region '{id}' on {date}",
                spec.path.display()
            )));
        }
    }
    let mut grid = Grid::filled(graph.n_regions(), n_days, 0.0);
    for r in 0..graph.n_regions() {
        let mut missing = 0usize;
        for day in 0..n_days {
            match cells.get(&(r, day)) {
                Some(&v) => grid.set(r, day, v),
                None => missing += 1,
            }
        }
        if missing > 0 {
            flags.push(DataFlag::GapFilled {
                series: spec.id.clone(),
                key: format!("{} ({missing} days)", graph.region_id(r)),
            });
        }
    }
    Ok(grid)
}

/// On-disk description of one hospital: flow probabilities as scalar exit
/// rates plus optional observed daily transition counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HospitalSpec {
    pub hospital_id: String,
    pub catchment: BTreeMap<String, f64>,
    pub direct_icu_prob: f64,
    pub floor_to_icu: f64,
    pub floor_discharge: f64,
    pub icu_to_floor: f64,
    pub icu_discharge: f64,
    pub floor_capacity: i64,
    pub icu_capacity: i64,
    #[serde(default)]
    pub initial_floor: i64,
    #[serde(default)]
    pub initial_icu: i64,
    #[serde(default)]
    pub observed_floor_moves: Vec<[i64; 3]>,
    #[serde(default)]
    pub observed_icu_moves: Vec<[i64; 3]>,
}

fn load_hospitals(
    path: &Path,
    graph: &CountyGraph,
    known_regions: &HashSet<String>,
    flags: &mut Vec<DataFlag>,
) -> Result<(Vec<HospitalConfig>, Vec<FlowObservation>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot open '{}': {e}", path.display())))?;
    let specs: Vec<HospitalSpec> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("'{}': {e}", path.display())))?;
    let mut configs = Vec::new();
    let mut flows = Vec::new();
    for spec in specs {
        let mut catchment = BTreeMap::new();
        for (region, &share) in &spec.catchment {
            if graph.index_of(region).is_some() {
                catchment.insert(region.clone(), share);
            } else if !known_regions.contains(region) {
                return Err(Error::Data(format!(
                    "'{}': hospital '{}' catchment names unknown region '{region}'",
                    path.display(),
                    spec.hospital_id
                )));
            }
        }
        if catchment.is_empty() {
            flags.push(DataFlag::HospitalDropped {
                hospital_id: spec.hospital_id.clone(),
            });
            continue;
        }
        let transition_probs = TransitionMatrix::from_exit_probs(
            spec.floor_to_icu,
            spec.floor_discharge,
            spec.icu_to_floor,
            spec.icu_discharge,
        )?;
        let config = HospitalConfig {
            hospital_id: spec.hospital_id.clone(),
            catchment,
            direct_icu_prob: spec.direct_icu_prob,
            transition_probs,
            capacity: Capacity {
                floor: spec.floor_capacity,
                icu: spec.icu_capacity,
            },
            initial_floor: spec.initial_floor,
            initial_icu: spec.initial_icu,
        };
        config.validate()?;
        if !spec.observed_floor_moves.is_empty() || !spec.observed_icu_moves.is_empty() {
            flows.push(FlowObservation {
                site: configs.len(),
                floor_moves: spec.observed_floor_moves,
                icu_moves: spec.observed_icu_moves,
            });
        }
        configs.push(config);
    }
    Ok((configs, flows))
}

/// Content hash of everything calibration conditions on. Field separators
/// prevent ambiguity between adjacent variable-length strings.
fn dataset_hash(
    window_start: NaiveDate,
    graph: &CountyGraph,
    data: &SurveillanceData,
    random_covariates: &[Covariate],
    fixed_covariates: &[Covariate],
    hospitals: &[HospitalConfig],
    flows: &[FlowObservation],
) -> String {
    let mut h = Sha256::new();
    h.update(b"window\x1f");
    h.update(window_start.to_string().as_bytes());
    h.update((data.n_days() as u64).to_le_bytes());
    h.update(b"regions\x1f");
    for r in 0..graph.n_regions() {
        h.update(graph.region_id(r).as_bytes());
        h.update([0x1f]);
        h.update(graph.population(r).to_le_bytes());
        h.update(graph.state_id(r).as_bytes());
        h.update([0x1e]);
    }
    h.update(b"edges\x1f");
    for r in 0..graph.n_regions() {
        for &nb in graph.neighbors(r) {
            if nb > r {
                h.update((r as u64).to_le_bytes());
                h.update((nb as u64).to_le_bytes());
            }
        }
    }
    h.update(b"cases\x1f");
    for r in 0..data.n_regions() {
        for &v in data.reported_cases.row(r) {
            h.update(v.to_le_bytes());
        }
    }
    h.update(b"tests\x1f");
    for (state, series) in &data.state_tests {
        h.update(state.as_bytes());
        h.update([0x1f]);
        for &v in series {
            h.update(v.to_le_bytes());
        }
    }
    h.update(b"admissions\x1f");
    h.update([data.state_admissions.is_some() as u8]);
    if let Some(adm) = &data.state_admissions {
        for (state, series) in adm {
            h.update(state.as_bytes());
            h.update([0x1f]);
            for &v in series {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.update(b"vaccinations\x1f");
    for r in 0..data.n_regions() {
        for &v in data.raw_vaccinations.row(r) {
            h.update(v.to_le_bytes());
        }
    }
    for (tag, covs) in [
        (b"random_covs\x1f".as_slice(), random_covariates),
        (b"fixed_covs\x1f".as_slice(), fixed_covariates),
    ] {
        h.update(tag);
        for cov in covs {
            h.update(cov.id.as_bytes());
            h.update([0x1f]);
            for r in 0..cov.values.n_regions() {
                for &v in cov.values.row(r) {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.update(b"hospitals\x1f");
    h.update(serde_json::to_vec(hospitals).expect("hospital configs serialize"));
    h.update(b"flows\x1f");
    for flow in flows {
        h.update((flow.site as u64).to_le_bytes());
        for moves in [&flow.floor_moves, &flow.icu_moves] {
            h.update((moves.len() as u64).to_le_bytes());
            for row in moves {
                for &v in row {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex_string(&h.finalize())
}

// ---------------------------------------------------------------------------
// Draw files
// ---------------------------------------------------------------------------

pub const DRAW_FORMAT: &str = "sirocco-draws";
pub const DRAW_FORMAT_VERSION: u32 = 1;

/// Header of a draw file: one JSON line followed by fixed-width binary
/// records (little-endian u64 iteration, then `flat_len` little-endian
/// f64 values). Appending a record never rewrites earlier bytes, so an
/// interrupted run leaves at most one partial record at the tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawFileMeta {
    pub format: String,
    pub version: u32,
    pub chain: usize,
    pub seed: u64,
    pub data_hash: String,
    pub config_fingerprint: String,
    pub flat_len: usize,
    /// Named slices of the flat vector, in order.
    pub layout: Vec<(String, usize)>,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
}

impl DrawFileMeta {
    pub fn new(
        ctx: &ModelContext,
        chain: usize,
        config: &McmcConfig,
        data_hash: &str,
        fingerprint: &str,
    ) -> DrawFileMeta {
        DrawFileMeta {
            format: DRAW_FORMAT.to_string(),
            version: DRAW_FORMAT_VERSION,
            chain,
            seed: config.seed,
            data_hash: data_hash.to_string(),
            config_fingerprint: fingerprint.to_string(),
            flat_len: flat_len(ctx),
            layout: crate::inference::flat_layout(ctx),
            iterations: config.iterations,
            burn_in: config.burn_in,
            thin: config.thin,
        }
    }

    fn record_len(&self) -> u64 {
        8 + self.flat_len as u64 * 8
    }
}

pub fn chain_draw_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("draws_chain_{chain:02}.bin"))
}

/// Draw-file paths in a directory, sorted by name. Empty when the
/// directory holds none or does not exist.
pub fn discover_draw_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if name.starts_with("draws_chain_") && name.ends_with(".bin") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Streams accepted draws of one chain to disk as they arrive.
pub struct FileSink<'a> {
    ctx: &'a ModelContext,
    writer: BufWriter<File>,
    flat_len: usize,
    records_written: u64,
}

impl<'a> FileSink<'a> {
    pub fn create(path: &Path, ctx: &'a ModelContext, meta: &DrawFileMeta) -> Result<FileSink<'a>> {
        if meta.flat_len != flat_len(ctx) {
            return Err(Error::Data(format!(
                "draw meta flat length {} does not match the model ({})",
                meta.flat_len,
                flat_len(ctx)
            )));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, meta)?;
        writer.write_all(b"\n")?;
        Ok(FileSink {
            ctx,
            writer,
            flat_len: meta.flat_len,
            records_written: 0,
        })
    }

    /// Reopens an existing draw file for resumption. The stored header
    /// must equal `expected`; a partial trailing record is truncated away.
    pub fn open_append(
        path: &Path,
        ctx: &'a ModelContext,
        expected: &DrawFileMeta,
    ) -> Result<FileSink<'a>> {
        let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(|e| {
            Error::Data(format!("cannot open draw file '{}': {e}", path.display()))
        })?;
        let header_len;
        let meta;
        {
            let mut reader = BufReader::new(&mut file);
            meta = read_meta_line(&mut reader, path)?;
            header_len = reader.stream_position()?;
        }
        if meta != *expected {
            return Err(Error::Data(format!(
                "draw file '{}' was produced by a different run configuration; \
                 refusing to append",
                path.display()
            )));
        }
        let total = file.metadata()?.len();
        let record_len = meta.record_len();
        let complete = (total - header_len) / record_len;
        let keep = header_len + complete * record_len;
        if keep != total {
            file.set_len(keep)?;
        }
        file.seek(SeekFrom::Start(keep))?;
        Ok(FileSink {
            ctx,
            writer: BufWriter::new(file),
            flat_len: meta.flat_len,
            records_written: complete,
        })
    }

    pub fn records_written(&self) -> u64 {
        self.records_written
    }

    pub fn finish(mut self) -> Result<u64> {
        self.writer.flush()?;
        Ok(self.records_written)
    }
}

impl DrawSink for FileSink<'_> {
    fn record(&mut self, iteration: u64, params: &ParameterSet) -> Result<()> {
        let flat = params.to_flat(self.ctx);
        debug_assert_eq!(flat.len(), self.flat_len);
        self.writer.write_all(&iteration.to_le_bytes())?;
        for v in flat {
            self.writer.write_all(&v.to_le_bytes())?;
        }
        self.records_written += 1;
        Ok(())
    }
}

fn read_meta_line(reader: &mut impl BufRead, path: &Path) -> Result<DrawFileMeta> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let meta: DrawFileMeta = serde_json::from_str(line.trim_end()).map_err(|e| {
        Error::Data(format!("draw file '{}' header: {e}", path.display()))
    })?;
    if meta.format != DRAW_FORMAT || meta.version != DRAW_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "draw file '{}' has format {}/{}, expected {DRAW_FORMAT}/{DRAW_FORMAT_VERSION}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

pub fn read_draw_meta(path: &Path) -> Result<DrawFileMeta> {
    let file = File::open(path).map_err(|e| {
        Error::Data(format!(
            "cannot open draw file '{}': {e}; run calibrate first",
            path.display()
        ))
    })?;
    read_meta_line(&mut BufReader::new(file), path)
}

/// Reads a draw file without a model context: header plus raw flat
/// vectors. A partial trailing record (interrupted run) is dropped.
pub fn read_flat_draws(path: &Path) -> Result<(DrawFileMeta, Vec<(u64, Vec<f64>)>)> {
    let file = File::open(path).map_err(|e| {
        Error::Data(format!(
            "cannot open draw file '{}': {e}; run calibrate first",
            path.display()
        ))
    })?;
    let mut reader = BufReader::new(file);
    let meta = read_meta_line(&mut reader, path)?;
    let mut out = Vec::new();
    let mut value_buf = vec![0u8; meta.flat_len * 8];
    loop {
        let mut iter_buf = [0u8; 8];
        match reader.read_exact(&mut iter_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        match reader.read_exact(&mut value_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let flat: Vec<f64> = value_buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((u64::from_le_bytes(iter_buf), flat));
    }
    Ok((meta, out))
}

/// Reads a draw file back into parameter sets for the given context.
pub fn read_draws(
    path: &Path,
    ctx: &ModelContext,
) -> Result<(DrawFileMeta, Vec<(u64, ParameterSet)>)> {
    let (meta, flats) = read_flat_draws(path)?;
    if meta.flat_len != flat_len(ctx) {
        return Err(Error::Data(format!(
            "draw file '{}' has flat length {} but the loaded dataset implies {}",
            path.display(),
            meta.flat_len,
            flat_len(ctx)
        )));
    }
    let mut draws = Vec::with_capacity(flats.len());
    for (iteration, flat) in flats {
        draws.push((iteration, ParameterSet::from_flat(ctx, &flat)?));
    }
    Ok((meta, draws))
}

// ---------------------------------------------------------------------------
// Output artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_fingerprint: String,
    pub data_hash: String,
    pub seed: u64,
    pub window_start: NaiveDate,
    pub n_regions: usize,
    pub n_days: usize,
    pub chains: usize,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub prior_only: bool,
    pub draws_per_chain: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastMetadata {
    pub config_fingerprint: String,
    pub data_hash: String,
    pub seed: u64,
    pub horizon: usize,
    pub draws_used: usize,
    pub replicates: usize,
    pub draw_stride: usize,
    pub levels: Vec<f64>,
    pub icu_threshold: f64,
    pub quantile_convention: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read '{}': {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("'{}': {e}", path.display())))
}

#[derive(Deserialize)]
struct FingerprintOnly {
    config_fingerprint: String,
}

/// Refuses to write into a directory holding artifacts from a different
/// configuration. Checked against both metadata files and every draw
/// file header present.
pub fn guard_fingerprint(dir: &Path, fingerprint: &str) -> Result<()> {
    let mismatch = |found: &str, what: &str| {
        Error::Data(format!(
            "output directory '{}' holds {what} for config {found} but this run \
             is {fingerprint}; refusing to mix fingerprints",
            dir.display()
        ))
    };
    for name in [RUN_METADATA_FILE, FORECAST_METADATA_FILE] {
        let path = dir.join(name);
        if path.is_file() {
            let found: FingerprintOnly = read_json(&path)?;
            if found.config_fingerprint != fingerprint {
                return Err(mismatch(&found.config_fingerprint, name));
            }
        }
    }
    for path in discover_draw_files(dir)? {
        let meta = read_draw_meta(&path)?;
        if meta.config_fingerprint != fingerprint {
            return Err(mismatch(&meta.config_fingerprint, "draw files"));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticRow {
    name: String,
    mean: f64,
    rhat: Option<f64>,
    ess: Option<f64>,
}

#[derive(Serialize)]
struct ChainReport {
    chain: usize,
    draws_recorded: u64,
    acceptance: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct CalibrationReport {
    scalars: Vec<DiagnosticRow>,
    chains: Vec<ChainReport>,
}

pub fn write_calibration_report(dir: &Path, run: &McmcRun) -> Result<()> {
    let scalars = run
        .diagnostics()
        .into_iter()
        .map(|d| DiagnosticRow {
            name: d.name,
            mean: d.mean,
            rhat: d.rhat,
            ess: d.ess,
        })
        .collect();
    let chains = run
        .chains
        .iter()
        .map(|c| ChainReport {
            chain: c.index,
            draws_recorded: c.draws_recorded,
            acceptance: c.acceptance.clone(),
        })
        .collect();
    write_json(&dir.join(DIAGNOSTICS_FILE), &CalibrationReport { scalars, chains })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Writes the forecast CSV set and its metadata file. Every row carries
/// the config fingerprint so downstream joins can detect mixed inputs.
pub fn write_forecast_outputs(
    dir: &Path,
    window_start: NaiveDate,
    n_history_days: usize,
    summary: &ForecastSummary,
    exceedance: &[(String, Vec<f64>)],
    meta: &ForecastMetadata,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fp = &meta.config_fingerprint;

    let mut w = csv_writer(&dir.join("quantiles.csv"))?;
    w.write_record(["scope", "date", "metric", "level", "value", "config_fingerprint"])?;
    for q in &summary.quantiles {
        w.write_record([
            q.scope.as_str(),
            &date_of(window_start, q.day).to_string(),
            q.metric.as_str(),
            &q.level.to_string(),
            &q.value.to_string(),
            fp,
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("spaghetti.csv"))?;
    w.write_record(["replicate", "scope", "date", "metric", "value", "config_fingerprint"])?;
    for s in &summary.spaghetti {
        w.write_record([
            &s.replicate.to_string(),
            s.scope.as_str(),
            &date_of(window_start, s.day).to_string(),
            s.metric.as_str(),
            &s.value.to_string(),
            fp,
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("icu_exceedance.csv"))?;
    w.write_record(["hospital_id", "date", "threshold", "probability", "config_fingerprint"])?;
    for (hospital_id, probs) in exceedance {
        for (h, &p) in probs.iter().enumerate() {
            w.write_record([
                hospital_id.as_str(),
                &date_of(window_start, n_history_days + h).to_string(),
                &meta.icu_threshold.to_string(),
                &p.to_string(),
                fp,
            ])?;
        }
    }
    w.flush()?;

    write_json(&dir.join(FORECAST_METADATA_FILE), meta)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SimulationTruth {
    pub seed: u64,
    pub config_fingerprint: String,
    pub data_hash: String,
    pub removal_prob: f64,
    pub waning_prob: f64,
    pub vax_efficacy: f64,
    pub transmission_log_mean: f64,
    pub detection_intercept: f64,
    pub detection_slope: f64,
    pub admission_log_rate: Option<f64>,
    pub dose_plateau: f64,
    pub total_infections: i64,
    pub total_reported: i64,
}

#[derive(Debug)]
pub struct SimulatedDataset {
    pub fingerprint: String,
    pub data_hash: String,
    pub window_start: NaiveDate,
    pub n_regions: usize,
    pub n_days: usize,
    pub truth: SimulationTruth,
}

/// Generates a synthetic surveillance dataset at the paths named by
/// `config.data`, then reloads it through `validate_inputs` to prove the
/// round trip. True generating parameters land in the output directory.
///
/// The first day seeds every region and is reported exactly; later days
/// report through the binomial detection model. State test volumes are
/// constant except where the day's positives exceed them, since a positive
/// requires a test.
pub fn simulate_dataset(config: &RunConfig) -> Result<SimulatedDataset> {
    let sim = &config.simulate;
    let start = parse_config_date(&sim.start_date, "simulate.start_date")?;
    let (graph, _known) = load_run_graph(config)?;
    let n_regions = graph.n_regions();
    let n_days = sim.n_days;
    let populations: Vec<i64> = (0..n_regions).map(|r| graph.population(r) as i64).collect();
    let tree = SeedTree::new(config.seed);

    let ramp = config.vaccination.ramp(start)?;
    let mut raw_vax = Grid::zeros(n_regions, n_days);
    {
        let mut rng = tree.stream("sim-vax", 0);
        for r in 0..n_regions {
            for t in 0..n_days {
                let rate = sim.dose_plateau * ramp.value(t as i64);
                raw_vax.set(r, t, poisson_draw(rate, &mut rng));
            }
        }
    }

    let log_mean = if sim.zero_transmission {
        // exp(-1000) underflows to exactly zero, so no rate survives.
        -1000.0
    } else {
        sim.transmission_log_mean
    };
    let transmission = TransmissionField {
        field: Grid::filled(n_regions, n_days, log_mean),
        day_noise: Grid::filled(n_regions, n_days, 0.0),
    };
    let scalars = EpiScalarParams {
        removal_prob: 10.0 / 140.0,
        waning_prob: 10.0 / 3660.0,
        vax_efficacy: 0.8,
        vax_lag_days: config.vaccination.lag_days,
    };
    let seeds: Vec<(usize, usize, i64)> = (0..n_regions).map(|r| (r, 0, sim.seed_cases)).collect();
    let traj = {
        let mut rng = tree.stream("sim-epi", 0);
        simulate_trajectory(
            &populations,
            &seeds,
            &transmission,
            &scalars,
            &raw_vax,
            n_days,
            &mut rng,
        )?
    };

    // Detection: seed-day counts are reported in full (the window opens at
    // the first report), later days thin through the test-rate logit.
    let state_regions = graph.state_groups();
    let mut state_pop: BTreeMap<String, i64> = BTreeMap::new();
    for (state, regions) in &state_regions {
        state_pop.insert(
            state.clone(),
            regions.iter().map(|&r| populations[r]).sum(),
        );
    }
    let mut reported = Grid::zeros(n_regions, n_days);
    {
        let mut rng = tree.stream("sim-detect", 0);
        for r in 0..n_regions {
            let state = graph.state_id(r).to_string();
            let share = populations[r] as f64 / state_pop[&state] as f64;
            let county_tests = (sim.daily_state_tests as f64 * share).round() as i64;
            for t in 0..n_days {
                let y = traj.y.get(r, t);
                let value = if t == 0 {
                    y
                } else {
                    let prob = inv_logit(
                        sim.detection_intercept
                            + sim.detection_slope * log_test_rate(county_tests, populations[r]),
                    );
                    binomial_draw(y, prob, &mut rng)
                };
                reported.set(r, t, value);
            }
        }
    }

    let mut state_tests: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    for (state, regions) in &state_regions {
        let series: Vec<i64> = (0..n_days)
            .map(|t| sim.daily_state_tests.max(reported.sum_over(regions, t)))
            .collect();
        state_tests.insert(state.clone(), series);
    }

    let state_admissions = if sim.with_admissions {
        let mut rng = tree.stream("sim-admissions", 0);
        let mut map: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        for (state, regions) in &state_regions {
            let series: Vec<i64> = (0..n_days)
                .map(|t| {
                    regions
                        .iter()
                        .map(|&r| {
                            draw_admissions(traj.infected.get(r, t), sim.admission_log_rate, &mut rng)
                        })
                        .sum()
                })
                .collect();
            map.insert(state.clone(), series);
        }
        Some(map)
    } else {
        None
    };

    // Write the files where the config's own data paths point, so the very
    // same config validates and calibrates against what was generated.
    write_region_day_csv(
        &config.data.cases,
        &["region_id", "date", "new_cases"],
        (0..n_regions).flat_map(|r| {
            let graph = &graph;
            let reported = &reported;
            (0..n_days).map(move |t| {
                (
                    graph.region_id(r).to_string(),
                    date_of(start, t),
                    reported.get(r, t),
                )
            })
        }),
    )?;
    write_region_day_csv(
        &config.data.tests,
        &["state_id", "date", "total_tests"],
        state_tests.iter().flat_map(|(state, series)| {
            series
                .iter()
                .enumerate()
                .map(move |(t, &v)| (state.clone(), date_of(start, t), v))
        }),
    )?;
    write_region_day_csv(
        &config.data.vaccinations,
        &["region_id", "date", "doses_initiated"],
        (0..n_regions).flat_map(|r| {
            let graph = &graph;
            let raw_vax = &raw_vax;
            (0..n_days).map(move |t| {
                (
                    graph.region_id(r).to_string(),
                    date_of(start, t),
                    raw_vax.get(r, t),
                )
            })
        }),
    )?;
    if let Some(adm) = &state_admissions {
        let path = config.data.admissions.as_ref().ok_or_else(|| {
            Error::Config(
                "simulate.with_admissions requires a data.admissions path".into(),
            )
        })?;
        write_region_day_csv(
            path,
            &["state_id", "date", "admissions"],
            adm.iter().flat_map(|(state, series)| {
                series
                    .iter()
                    .enumerate()
                    .map(move |(t, &v)| (state.clone(), date_of(start, t), v))
            }),
        )?;
    }

    let validated = validate_inputs(config)?;
    let total_infections: i64 = (0..n_regions).map(|r| traj.y.row(r).iter().sum::<i64>()).sum();
    let total_reported: i64 = (0..n_regions).map(|r| reported.row(r).iter().sum::<i64>()).sum();
    let truth = SimulationTruth {
        seed: config.seed,
        config_fingerprint: validated.fingerprint.clone(),
        data_hash: validated.data_hash.clone(),
        removal_prob: scalars.removal_prob,
        waning_prob: scalars.waning_prob,
        vax_efficacy: scalars.vax_efficacy,
        transmission_log_mean: log_mean,
        detection_intercept: sim.detection_intercept,
        detection_slope: sim.detection_slope,
        admission_log_rate: sim.with_admissions.then_some(sim.admission_log_rate),
        dose_plateau: sim.dose_plateau,
        total_infections,
        total_reported,
    };
    write_json(&config.output_dir.join(TRUE_PARAMS_FILE), &truth)?;
    Ok(SimulatedDataset {
        fingerprint: validated.fingerprint,
        data_hash: validated.data_hash,
        window_start: validated.window_start,
        n_regions,
        n_days,
        truth,
    })
}

fn write_region_day_csv(
    path: &Path,
    header: &[&str; 3],
    rows: impl Iterator<Item = (String, NaiveDate, i64)>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for (id, date, value) in rows {
        w.write_record([id.as_str(), &date.to_string(), &value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
