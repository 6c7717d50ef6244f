//! Command-line front end: calibrate, forecast, simulate, validate, and
//! diagnose, all driven by one TOML run configuration with flag overrides.
//!
//! Exit codes: 0 success, 1 usage (bad flags, unreadable config), 2 data
//! validation, 3 runtime failure.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sirocco::forecast::{icu_exceedance_by_hospital, posterior_predictive, summarize};
use sirocco::inference::{run_mcmc, summarize_scalars, DrawSink, Priors};
use sirocco::io::{
    chain_draw_path, date_of, discover_draw_files, guard_fingerprint, read_draws,
    read_flat_draws, validate_inputs, write_calibration_report, write_forecast_outputs,
    write_json, DrawFileMeta, FileSink, ForecastMetadata, RunConfig, RunMetadata,
    RUN_METADATA_FILE,
};
use sirocco::rng::SeedTree;
use sirocco::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sirocco",
    version,
    about = "Spatiotemporal epidemic calibration and forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler against the configured dataset and persist draws.
    Calibrate(CalibrateArgs),
    /// Simulate forward from stored draws and write forecast summaries.
    Forecast(ForecastArgs),
    /// Generate a synthetic dataset at the config's own data paths.
    Simulate(SimulateArgs),
    /// Load and cross-check the inputs without running anything.
    Validate(ValidateArgs),
    /// Summarize stored draws: mean, split R-hat, and effective sample size.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sample from the prior, ignoring the observation likelihoods.
    #[arg(long)]
    prior_only: bool,
}

#[derive(Args)]
struct ForecastArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// Quantile levels, comma separated (e.g. 0.25,0.5,0.75).
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Directory holding the draw files; defaults to the output directory.
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Keep every k-th posterior draw.
    #[arg(long)]
    stride: Option<usize>,
    /// Forward runs per posterior draw.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Force transmission to zero so nothing spreads past the seeds.
    #[arg(long)]
    zero_transmission: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Directory holding the draw files; defaults to the output directory.
    #[arg(long)]
    draws: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = args.iterations {
        config.mcmc.iterations = v;
    }
    if let Some(v) = args.burn_in {
        config.mcmc.burn_in = v;
    }
    if let Some(v) = args.thin {
        config.mcmc.thin = v;
    }
    if let Some(v) = args.chains {
        config.mcmc.chains = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(p) = args.output {
        config.output_dir = p;
    }
    if args.prior_only {
        config.mcmc.prior_only = true;
    }
    config.validate()?;

    let inputs = validate_inputs(&config)?;
    let ctx = &inputs.ctx;
    println!(
        "loaded {} regions x {} days from {}; fingerprint {}",
        ctx.n_regions(),
        ctx.data.n_days(),
        inputs.window_start,
        inputs.fingerprint
    );
    for flag in &ctx.data.flags {
        println!("note: {flag}");
    }

    fs::create_dir_all(&config.output_dir)?;
    guard_fingerprint(&config.output_dir, &inputs.fingerprint)?;

    let mcmc = config.mcmc.to_config(config.seed);
    let mut sinks = Vec::with_capacity(mcmc.chains);
    for chain in 0..mcmc.chains {
        let meta = DrawFileMeta::new(ctx, chain, &mcmc, &inputs.data_hash, &inputs.fingerprint);
        let path = chain_draw_path(&config.output_dir, chain);
        sinks.push(FileSink::create(&path, ctx, &meta)?);
    }
    let mut sink_refs: Vec<&mut dyn DrawSink> =
        sinks.iter_mut().map(|s| s as &mut dyn DrawSink).collect();
    let run = run_mcmc(ctx, &Priors::default(), &mcmc, &mut sink_refs)?;
    drop(sink_refs);
    for sink in sinks {
        sink.finish()?;
    }

    write_calibration_report(&config.output_dir, &run)?;
    let draws_per_chain = run.chains.first().map_or(0, |c| c.draws_recorded);
    let metadata = RunMetadata {
        config_fingerprint: inputs.fingerprint.clone(),
        data_hash: inputs.data_hash.clone(),
        seed: config.seed,
        window_start: inputs.window_start,
        n_regions: ctx.n_regions(),
        n_days: ctx.data.n_days(),
        chains: mcmc.chains,
        iterations: mcmc.iterations,
        burn_in: mcmc.burn_in,
        thin: mcmc.thin,
        prior_only: mcmc.prior_only,
        draws_per_chain,
    };
    write_json(&config.output_dir.join(RUN_METADATA_FILE), &metadata)?;

    println!(
        "recorded {draws_per_chain} draws per chain across {} chains",
        mcmc.chains
    );
    for d in run.diagnostics() {
        println!(
            "{:<26} mean {:>14.6}  rhat {:>8}  ess {:>10}",
            d.name,
            d.mean,
            d.rhat.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            d.ess.map_or("n/a".to_string(), |v| format!("{v:.1}")),
        );
    }
    println!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = args.horizon {
        config.forecast.horizon = v;
    }
    if let Some(v) = args.levels {
        config.forecast.levels = v;
    }
    if let Some(v) = args.stride {
        config.forecast.draw_stride = v;
    }
    if let Some(v) = args.replicates {
        config.forecast.replicates_per_draw = v;
    }
    config.validate()?;

    let inputs = validate_inputs(&config)?;
    let draws_dir = args.draws.unwrap_or_else(|| config.output_dir.clone());
    let files = discover_draw_files(&draws_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no draw files in '{}'; run calibrate first",
            draws_dir.display()
        )));
    }
    let mut pooled = Vec::new();
    for path in &files {
        let (meta, draws) = read_draws(path, &inputs.ctx)?;
        if meta.config_fingerprint != inputs.fingerprint {
            return Err(Error::Data(format!(
                "draw file '{}' has fingerprint {} but the current config is {}; \
                 refusing to mix fingerprints",
                path.display(),
                meta.config_fingerprint,
                inputs.fingerprint
            )));
        }
        pooled.extend(draws.into_iter().map(|(_, p)| p));
    }
    println!(
        "pooled {} draws from {} chain files in {}",
        pooled.len(),
        files.len(),
        draws_dir.display()
    );

    let fcfg = config.forecast_config(inputs.window_start)?;
    let tree = SeedTree::new(config.seed);
    let ensemble = posterior_predictive(&inputs.ctx, &pooled, &fcfg, &tree)?;
    let opts = config.summary_options();
    let summary = summarize(&inputs.ctx, &ensemble, &opts)?;
    let exceedance = if inputs.ctx.hospital_configs.is_empty() {
        Vec::new()
    } else {
        icu_exceedance_by_hospital(&inputs.ctx, &ensemble, config.forecast.icu_threshold)?
    };

    let out_dir = args.output.unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    guard_fingerprint(&out_dir, &inputs.fingerprint)?;
    let draws_used = pooled.len().div_ceil(fcfg.draw_stride);
    let meta = ForecastMetadata {
        config_fingerprint: inputs.fingerprint.clone(),
        data_hash: inputs.data_hash.clone(),
        seed: config.seed,
        horizon: fcfg.horizon,
        draws_used,
        replicates: ensemble.replicates.len(),
        draw_stride: fcfg.draw_stride,
        levels: opts.levels.clone(),
        icu_threshold: config.forecast.icu_threshold,
        quantile_convention: summary.convention.to_string(),
    };
    write_forecast_outputs(
        &out_dir,
        inputs.window_start,
        ensemble.n_history_days,
        &summary,
        &exceedance,
        &meta,
    )?;
    println!(
        "forecast horizon {} days from {}: {} replicates over {} draws",
        fcfg.horizon,
        date_of(inputs.window_start, ensemble.n_history_days),
        ensemble.replicates.len(),
        draws_used
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(p) = args.output {
        config.output_dir = p;
    }
    if args.zero_transmission {
        config.simulate.zero_transmission = true;
    }
    config.validate()?;
    let out = simulate(&config)?;
    println!(
        "simulated {} regions x {} days from {}; {} infections, {} reported",
        out.n_regions,
        out.n_days,
        out.window_start,
        out.truth.total_infections,
        out.truth.total_reported
    );
    println!("dataset written to the config's data paths; fingerprint {}", out.fingerprint);
    Ok(())
}

fn simulate(config: &RunConfig) -> Result<sirocco::io::SimulatedDataset> {
    sirocco::io::simulate_dataset(config)
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let inputs = validate_inputs(&config)?;
    let ctx = &inputs.ctx;
    let n_days = ctx.data.n_days();
    println!("regions: {}", ctx.n_regions());
    println!(
        "window: {} to {} ({} days)",
        inputs.window_start,
        date_of(inputs.window_start, n_days - 1),
        n_days
    );
    println!("states: {}", ctx.state_regions.len());
    println!(
        "admissions: {}",
        if ctx.data.state_admissions.is_some() { "present" } else { "absent" }
    );
    println!("hospitals: {}", ctx.hospital_configs.len());
    println!(
        "covariates: {} regional, {} fixed",
        ctx.random_covariates.len(),
        ctx.fixed_covariates.len()
    );
    for flag in &ctx.data.flags {
        println!("note: {flag}");
    }
    println!("data hash: {}", inputs.data_hash);
    println!("config fingerprint: {}", inputs.fingerprint);
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let draws_dir = args.draws.unwrap_or_else(|| config.output_dir.clone());
    let files = discover_draw_files(&draws_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no draw files in '{}'; run calibrate first",
            draws_dir.display()
        )));
    }

    // Scalar slots are the singleton entries of the flat layout; field
    // blocks are skipped because per-cell traces are not useful here.
    let mut names: Vec<String> = Vec::new();
    let mut offsets: Vec<usize> = Vec::new();
    let mut traces: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut reference_layout = None;
    for path in &files {
        let (meta, records) = read_flat_draws(path)?;
        match &reference_layout {
            None => {
                let mut offset = 0;
                for (name, len) in &meta.layout {
                    if *len == 1 {
                        names.push(name.clone());
                        offsets.push(offset);
                    }
                    offset += len;
                }
                reference_layout = Some(meta.layout.clone());
            }
            Some(layout) if *layout != meta.layout => {
                return Err(Error::Data(format!(
                    "draw file '{}' has a different parameter layout; \
                     refusing to pool chains",
                    path.display()
                )));
            }
            Some(_) => {}
        }
        let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len()); names.len()];
        for (_, flat) in &records {
            for (k, &off) in offsets.iter().enumerate() {
                chain[k].push(flat[off]);
            }
        }
        println!(
            "{}: {} draws (chain {})",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("?"),
            records.len(),
            meta.chain
        );
        traces.push(chain);
    }

    for d in summarize_scalars(&names, &traces) {
        println!(
            "{:<26} mean {:>14.6}  rhat {:>8}  ess {:>10}",
            d.name,
            d.mean,
            d.rhat.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            d.ess.map_or("n/a".to_string(), |v| format!("{v:.1}")),
        );
    }
    Ok(())
}
