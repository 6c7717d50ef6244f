//! Posterior sampling for the calibration model: a fixed-order Gibbs/
//! Metropolis sweep over latent trajectories, noise cells, field blocks,
//! Gaussian conditionals, hyperparameters, scalars, hospital flow, and
//! state-total imputation, with burn-in-only proposal adaptation and
//! deterministic per-iteration random streams so runs replay exactly.

pub mod context;
pub mod diagnostics;
pub mod fields;
pub mod flow;
pub mod gaussian;
pub mod hypers;
pub mod imputation;
pub mod latent;
pub mod logpost;
pub mod noise;
pub mod params;
pub mod scalars;
pub mod structures;

#[cfg(test)]
pub(crate) mod testutil;

pub use context::{ContextOptions, Covariate, FlowObservation, ModelContext};
pub use diagnostics::{effective_sample_size, split_rhat, summarize_scalars, ScalarDiagnostic};
pub use logpost::{log_posterior, log_posterior_parts, LogPostParts};
pub use params::{flat_layout, flat_len, ParameterSet, Priors};
pub use structures::{Structures, Workspace};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

use fields::FieldKind;
use params::N_EXITS;

/// Sampler settings. Draw count is `(iterations - burn_in) / thin` per
/// chain; `iterations == 0` is the init-only mode that snapshots the
/// deterministic starting state without sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub iterations: u64,
    pub burn_in: u64,
    /// Keep every `thin`-th post-burn-in iteration.
    pub thin: u64,
    pub chains: usize,
    pub seed: u64,
    /// Days per proposal block in the field updates.
    pub block_width: usize,
    /// Largest single move of a latent count cell.
    pub latent_step: i64,
    /// Sample the prior: data terms drop out of every kernel and the
    /// latent-trajectory and imputation passes are skipped.
    pub prior_only: bool,
    /// Iterations between full-state audits; 0 disables them.
    pub audit_interval: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 2000,
            burn_in: 500,
            thin: 1,
            chains: 2,
            seed: 1,
            block_width: 15,
            latent_step: 2,
            prior_only: false,
            audit_interval: 25,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("at least one chain".into()));
        }
        if self.block_width == 0 {
            return Err(Error::Config("block_width must be at least 1".into()));
        }
        if self.latent_step < 1 {
            return Err(Error::Config("latent_step must be at least 1".into()));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> u64 {
        if self.iterations == 0 {
            1
        } else {
            (self.iterations - self.burn_in) / self.thin
        }
    }
}

/// Proposal scales, one per Metropolis kernel family.
#[derive(Debug, Clone, PartialEq)]
pub struct Scales {
    pub mu_block: f64,
    pub tests_block: f64,
    pub adm_block: f64,
    pub eps_cell: f64,
    pub det_cell: f64,
    pub beta_tilde: (f64, f64),
    pub rho: Vec<f64>,
    pub flow: [f64; N_EXITS],
}

impl Scales {
    fn new(n_alphas: usize) -> Scales {
        Scales {
            mu_block: 0.5,
            tests_block: 0.5,
            adm_block: 0.5,
            eps_cell: 0.5,
            det_cell: 0.5,
            beta_tilde: (0.1, 0.1),
            rho: vec![0.3; hypers::rho_slot_count(n_alphas)],
            flow: [0.3; N_EXITS],
        }
    }

    /// Flat export for persistence, in a fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![
            self.mu_block,
            self.tests_block,
            self.adm_block,
            self.eps_cell,
            self.det_cell,
            self.beta_tilde.0,
            self.beta_tilde.1,
        ];
        out.extend_from_slice(&self.rho);
        out.extend_from_slice(&self.flow);
        out
    }

    pub fn flat_len(n_alphas: usize) -> usize {
        7 + hypers::rho_slot_count(n_alphas) + N_EXITS
    }
}

/// Per-kernel acceptance counters for one adaptation window (and, summed,
/// for the whole run).
#[derive(Debug, Clone, Default)]
struct Tallies {
    latent: [(u64, u64); 4],
    noise: [(u64, u64); 2],
    mu_block: (u64, u64),
    tests_block: (u64, u64),
    adm_block: (u64, u64),
    beta_tilde: [(u64, u64); 2],
    rho: Vec<(u64, u64)>,
    vax: (u64, u64),
    flow: [(u64, u64); N_EXITS],
    imputation: [(u64, u64); 2],
}

impl Tallies {
    fn new(n_alphas: usize) -> Tallies {
        Tallies {
            rho: vec![(0, 0); hypers::rho_slot_count(n_alphas)],
            ..Tallies::default()
        }
    }

    fn absorb(&mut self, other: &Tallies) {
        let add = |a: &mut (u64, u64), b: (u64, u64)| {
            a.0 += b.0;
            a.1 += b.1;
        };
        for (a, b) in self.latent.iter_mut().zip(other.latent) {
            add(a, b);
        }
        for (a, b) in self.noise.iter_mut().zip(other.noise) {
            add(a, b);
        }
        add(&mut self.mu_block, other.mu_block);
        add(&mut self.tests_block, other.tests_block);
        add(&mut self.adm_block, other.adm_block);
        for (a, b) in self.beta_tilde.iter_mut().zip(other.beta_tilde) {
            add(a, b);
        }
        for (a, b) in self.rho.iter_mut().zip(&other.rho) {
            add(a, *b);
        }
        add(&mut self.vax, other.vax);
        for (a, b) in self.flow.iter_mut().zip(other.flow) {
            add(a, b);
        }
        for (a, b) in self.imputation.iter_mut().zip(other.imputation) {
            add(a, b);
        }
    }

    fn rates(&self) -> Vec<(String, f64)> {
        let rate = |t: (u64, u64)| {
            if t.1 == 0 {
                f64::NAN
            } else {
                t.0 as f64 / t.1 as f64
            }
        };
        let mut out = Vec::new();
        for (name, t) in ["latent_y", "latent_c", "latent_d", "latent_e"]
            .iter()
            .zip(self.latent)
        {
            out.push((name.to_string(), rate(t)));
        }
        out.push(("epsilon_cells".to_string(), rate(self.noise[0])));
        out.push(("detection_noise_cells".to_string(), rate(self.noise[1])));
        out.push(("transmission_blocks".to_string(), rate(self.mu_block)));
        out.push(("test_volume_blocks".to_string(), rate(self.tests_block)));
        out.push(("admission_blocks".to_string(), rate(self.adm_block)));
        out.push(("detection_intercept".to_string(), rate(self.beta_tilde[0])));
        out.push(("detection_slope".to_string(), rate(self.beta_tilde[1])));
        for (i, t) in self.rho.iter().enumerate() {
            out.push((format!("correlation_{i}"), rate(*t)));
        }
        out.push(("vax_efficacy".to_string(), rate(self.vax)));
        for (k, t) in self.flow.iter().enumerate() {
            out.push((format!("flow_exit_{k}"), rate(*t)));
        }
        out.push(("test_imputation".to_string(), rate(self.imputation[0])));
        out.push(("admission_imputation".to_string(), rate(self.imputation[1])));
        out
    }
}

const ADAPT_INTERVAL: u64 = 50;
const BLOCK_TARGET: f64 = 0.3;
const CELL_TARGET: f64 = 0.4;
const ADAPT_GAIN: f64 = 0.3;

fn adapt_scale(scale: &mut f64, tally: (u64, u64), target: f64, lo: f64, hi: f64) {
    if tally.1 == 0 {
        return;
    }
    let rate = tally.0 as f64 / tally.1 as f64;
    *scale = (*scale * (ADAPT_GAIN * (rate - target)).exp()).clamp(lo, hi);
}

/// Receives accepted posterior draws as they are produced. Implementations
/// persist them (or keep a subset in memory for forecasting).
pub trait DrawSink: Send {
    fn record(&mut self, iteration: u64, params: &ParameterSet) -> Result<()>;
}

/// Discards draws; the tracked scalar traces still accumulate in the run.
pub struct NullSink;

impl DrawSink for NullSink {
    fn record(&mut self, _iteration: u64, _params: &ParameterSet) -> Result<()> {
        Ok(())
    }
}

/// Keeps every `stride`-th recorded draw in memory.
pub struct MemorySink {
    pub stride: usize,
    pub kept: Vec<(u64, ParameterSet)>,
    seen: usize,
}

impl MemorySink {
    pub fn new(stride: usize) -> MemorySink {
        MemorySink {
            stride: stride.max(1),
            kept: Vec::new(),
            seen: 0,
        }
    }
}

impl DrawSink for MemorySink {
    fn record(&mut self, iteration: u64, params: &ParameterSet) -> Result<()> {
        if self.seen % self.stride == 0 {
            self.kept.push((iteration, params.clone()));
        }
        self.seen += 1;
        Ok(())
    }
}

/// One chain's working state. Public so integration tests can drive single
/// kernels against a live chain.
pub struct Chain<'a> {
    pub ctx: &'a ModelContext,
    pub priors: &'a Priors,
    pub config: &'a McmcConfig,
    pub params: ParameterSet,
    pub ws: Workspace,
    pub structures: Structures,
    pub scales: Scales,
    pub index: usize,
    tree: SeedTree,
    window: Tallies,
    lifetime: Tallies,
}

impl<'a> Chain<'a> {
    pub fn new(
        ctx: &'a ModelContext,
        priors: &'a Priors,
        config: &'a McmcConfig,
        index: usize,
    ) -> Result<Chain<'a>> {
        let params = ParameterSet::init(ctx, priors)?;
        let structures = Structures::build(ctx, &params)?;
        let ws = Workspace::new(ctx, &params);
        let n_alphas = params.transmission.alphas.len();
        let lp = log_posterior(ctx, &structures, priors, &params, config.prior_only);
        if !lp.is_finite() {
            let parts = log_posterior_parts(ctx, &structures, priors, &params, config.prior_only);
            return Err(Error::Runtime(format!(
                "initial state has non-finite log posterior: {parts:?}"
            )));
        }
        Ok(Chain {
            ctx,
            priors,
            config,
            params,
            ws,
            structures,
            scales: Scales::new(n_alphas),
            index,
            tree: SeedTree::new(config.seed).subtree("chain", index as u64),
            window: Tallies::new(n_alphas),
            lifetime: Tallies::new(n_alphas),
        })
    }

    pub fn log_posterior(&self) -> f64 {
        log_posterior(
            self.ctx,
            &self.structures,
            self.priors,
            &self.params,
            self.config.prior_only,
        )
    }

    /// One full sweep in the fixed update order. `iter` numbers sweeps from
    /// 1; it seeds the iteration's random stream, so a replayed iteration
    /// reproduces its draws exactly.
    pub fn sweep(&mut self, iter: u64) -> Result<()> {
        let mut rng = self.tree.stream("iter", iter);
        let prior_only = self.config.prior_only;

        if !prior_only {
            let t = latent::latent_sweep(
                self.ctx,
                &mut self.params,
                &self.ws,
                self.config.latent_step,
                &mut rng,
            );
            for (a, b) in self.window.latent.iter_mut().zip(t) {
                a.0 += b.0;
                a.1 += b.1;
            }
        }

        let t = noise::noise_sweep(
            self.ctx,
            &mut self.params,
            &mut self.ws,
            self.scales.eps_cell,
            self.scales.det_cell,
            prior_only,
            &mut rng,
        );
        for (a, b) in self.window.noise.iter_mut().zip(t) {
            a.0 += b.0;
            a.1 += b.1;
        }

        for (kind, scale, slot) in [
            (FieldKind::Transmission, self.scales.mu_block, 0),
            (FieldKind::TestVolume, self.scales.tests_block, 1),
            (FieldKind::Admission, self.scales.adm_block, 2),
        ] {
            let t = fields::field_sweep(
                kind,
                self.ctx,
                &mut self.params,
                &mut self.ws,
                &self.structures,
                scale,
                self.config.block_width,
                prior_only,
                &mut rng,
            );
            let target = match slot {
                0 => &mut self.window.mu_block,
                1 => &mut self.window.tests_block,
                _ => &mut self.window.adm_block,
            };
            target.0 += t.0;
            target.1 += t.1;
        }

        gaussian::gaussian_sweep(
            self.ctx,
            &mut self.params,
            &mut self.ws,
            &self.structures,
            self.priors,
            &mut rng,
        );

        hypers::update_taus(
            self.ctx,
            &mut self.params,
            &self.ws,
            &self.structures,
            self.priors,
            &mut rng,
        );
        let t = hypers::rho_sweep(
            self.ctx,
            &mut self.params,
            &self.ws,
            &mut self.structures,
            &self.scales.rho,
            &mut rng,
        )?;
        for (a, b) in self.window.rho.iter_mut().zip(t) {
            a.0 += b.0;
            a.1 += b.1;
        }
        hypers::update_noise_variances(&mut self.params, self.priors, &mut rng);

        scalars::update_transition_probs(
            self.ctx,
            &mut self.params,
            self.priors,
            prior_only,
            &mut rng,
        );
        self.window.vax.1 += 1;
        self.window.vax.0 +=
            scalars::update_vax_prob(self.ctx, &mut self.params, self.priors, prior_only, &mut rng)
                as u64;
        let t = scalars::update_detection_coeffs(
            self.ctx,
            &mut self.params,
            &mut self.ws,
            self.priors,
            self.scales.beta_tilde,
            prior_only,
            &mut rng,
        );
        for (a, b) in self.window.beta_tilde.iter_mut().zip(t) {
            a.0 += b.0;
            a.1 += b.1;
        }

        let t = flow::flow_sweep(
            self.ctx,
            &mut self.params,
            self.priors,
            &self.scales.flow,
            prior_only,
            &mut rng,
        );
        for (a, b) in self.window.flow.iter_mut().zip(t) {
            a.0 += b.0;
            a.1 += b.1;
        }

        let t = imputation::imputation_sweep(
            self.ctx,
            &mut self.params,
            &mut self.ws,
            prior_only,
            &mut rng,
        );
        for (a, b) in self.window.imputation.iter_mut().zip(t) {
            a.0 += b.0;
            a.1 += b.1;
        }

        if self.config.audit_interval > 0 && iter % self.config.audit_interval == 0 {
            self.audit(iter)?;
        }
        Ok(())
    }

    /// Full-state audit: parameter validity and a from-scratch log-posterior
    /// evaluation that must come back finite.
    pub fn audit(&self, iter: u64) -> Result<()> {
        self.params
            .validate(self.ctx)
            .map_err(|e| Error::Runtime(format!("iteration {iter}: invalid state: {e}")))?;
        let lp = self.log_posterior();
        if !lp.is_finite() {
            return Err(Error::Runtime(format!(
                "iteration {iter}: log posterior became non-finite"
            )));
        }
        #[cfg(debug_assertions)]
        {
            let fresh = Workspace::new(self.ctx, &self.params);
            for (a, b) in self.ws.pi.flat().iter().zip(fresh.pi.flat()) {
                debug_assert!((a - b).abs() < 1e-9, "detection cache drift");
            }
            for (a, b) in self.ws.inf_factor.flat().iter().zip(fresh.inf_factor.flat()) {
                debug_assert!(
                    (a - b).abs() < 1e-9 * (1.0 + a.abs()),
                    "infection cache drift"
                );
            }
        }
        Ok(())
    }

    /// Robbins-Monro step on every proposal scale from the window tallies,
    /// then resets the window. Burn-in only; callers stop adapting after it.
    pub fn adapt(&mut self) {
        let w = &self.window;
        adapt_scale(&mut self.scales.eps_cell, w.noise[0], CELL_TARGET, 1e-3, 10.0);
        adapt_scale(&mut self.scales.det_cell, w.noise[1], CELL_TARGET, 1e-3, 10.0);
        adapt_scale(&mut self.scales.mu_block, w.mu_block, BLOCK_TARGET, 1e-3, 1.0);
        adapt_scale(&mut self.scales.tests_block, w.tests_block, BLOCK_TARGET, 1e-3, 1.0);
        adapt_scale(&mut self.scales.adm_block, w.adm_block, BLOCK_TARGET, 1e-3, 1.0);
        adapt_scale(&mut self.scales.beta_tilde.0, w.beta_tilde[0], CELL_TARGET, 1e-4, 10.0);
        adapt_scale(&mut self.scales.beta_tilde.1, w.beta_tilde[1], CELL_TARGET, 1e-4, 10.0);
        for (scale, tally) in self.scales.rho.iter_mut().zip(&w.rho) {
            adapt_scale(scale, *tally, CELL_TARGET, 1e-4, 10.0);
        }
        for (scale, tally) in self.scales.flow.iter_mut().zip(&w.flow) {
            adapt_scale(scale, *tally, CELL_TARGET, 1e-4, 10.0);
        }
        let window = std::mem::replace(&mut self.window, Tallies::new(self.scales.rho.len() - hypers::RHO_FIXED_SLOTS));
        self.lifetime.absorb(&window);
    }

    fn flush_window(&mut self) {
        let n_alphas = self.scales.rho.len() - hypers::RHO_FIXED_SLOTS;
        let window = std::mem::replace(&mut self.window, Tallies::new(n_alphas));
        self.lifetime.absorb(&window);
    }
}

/// Everything a finished chain reports back.
pub struct ChainRun {
    pub index: usize,
    pub tracked_names: Vec<String>,
    /// Scalar-major traces: `tracked[s][d]` is scalar s at draw d.
    pub tracked: Vec<Vec<f64>>,
    pub final_params: ParameterSet,
    pub final_scales: Scales,
    pub acceptance: Vec<(String, f64)>,
    pub draws_recorded: u64,
}

/// A finished multi-chain run.
pub struct McmcRun {
    pub chains: Vec<ChainRun>,
}

impl McmcRun {
    pub fn tracked_names(&self) -> &[String] {
        &self.chains[0].tracked_names
    }

    /// Convergence summaries over every tracked scalar.
    pub fn diagnostics(&self) -> Vec<ScalarDiagnostic> {
        let names = self.tracked_names().to_vec();
        let traces: Vec<Vec<Vec<f64>>> =
            self.chains.iter().map(|c| c.tracked.clone()).collect();
        summarize_scalars(&names, &traces)
    }

    /// Pooled draws of one tracked scalar across chains.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.chains[0]
            .tracked_names
            .iter()
            .position(|n| n == name)?;
        Some(
            self.chains
                .iter()
                .flat_map(|c| c.tracked[idx].iter().copied())
                .collect(),
        )
    }
}

/// Names of the per-draw trace values beyond the model's own tracked
/// scalars.
fn derived_names() -> Vec<String> {
    vec![
        "log_posterior".to_string(),
        "total_latent_infections".to_string(),
    ]
}

fn run_one_chain(
    ctx: &ModelContext,
    priors: &Priors,
    config: &McmcConfig,
    index: usize,
    sink: &mut dyn DrawSink,
) -> Result<ChainRun> {
    let mut chain = Chain::new(ctx, priors, config, index)?;
    let mut tracked_names: Vec<String> = chain
        .params
        .tracked_scalars()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    tracked_names.extend(derived_names());
    let mut tracked: Vec<Vec<f64>> = vec![Vec::new(); tracked_names.len()];
    let mut draws = 0u64;

    fn record(
        chain: &Chain,
        tracked: &mut [Vec<f64>],
        iter: u64,
        sink: &mut dyn DrawSink,
    ) -> Result<()> {
        let scalars = chain.params.tracked_scalars();
        let lp = chain.log_posterior();
        let total_y: i64 = chain.params.traj.y.flat().iter().sum();
        for (slot, (_, v)) in tracked.iter_mut().zip(&scalars) {
            slot.push(*v);
        }
        let base = scalars.len();
        tracked[base].push(lp);
        tracked[base + 1].push(total_y as f64);
        sink.record(iter, &chain.params)
    }

    if config.iterations == 0 {
        record(&chain, &mut tracked, 0, &mut *sink)?;
        draws = 1;
    } else {
        for iter in 1..=config.iterations {
            chain.sweep(iter)?;
            if iter <= config.burn_in {
                if iter % ADAPT_INTERVAL == 0 {
                    chain.adapt();
                }
            } else if (iter - config.burn_in) % config.thin == 0 {
                record(&chain, &mut tracked, iter, &mut *sink)?;
                draws += 1;
            }
        }
    }
    chain.flush_window();

    Ok(ChainRun {
        index,
        tracked_names,
        tracked,
        final_params: chain.params,
        final_scales: chain.scales,
        acceptance: chain.lifetime.rates(),
        draws_recorded: draws,
    })
}

/// Runs every chain, one thread each. `sinks` must be empty (discard
/// draws) or hold exactly one sink per chain. Chains derive their random
/// streams from `(seed, chain index, iteration)`, so results are
/// byte-identical across runs and independent of thread scheduling.
pub fn run_mcmc(
    ctx: &ModelContext,
    priors: &Priors,
    config: &McmcConfig,
    sinks: &mut [&mut dyn DrawSink],
) -> Result<McmcRun> {
    config.validate()?;
    priors.validate()?;
    if !sinks.is_empty() && sinks.len() != config.chains {
        return Err(Error::Config(format!(
            "{} sinks for {} chains",
            sinks.len(),
            config.chains
        )));
    }

    let mut nulls: Vec<NullSink> = Vec::new();
    if sinks.is_empty() {
        nulls.resize_with(config.chains, || NullSink);
    }

    let results: Vec<Result<ChainRun>> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(config.chains);
        if sinks.is_empty() {
            for (index, sink) in nulls.iter_mut().enumerate() {
                handles.push(
                    scope.spawn(move || run_one_chain(ctx, priors, config, index, sink)),
                );
            }
        } else {
            for (index, sink) in sinks.iter_mut().enumerate() {
                handles.push(scope.spawn(move || {
                    run_one_chain(ctx, priors, config, index, &mut **sink)
                }));
            }
        }
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });

    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(McmcRun { chains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use testutil::two_county_fixture;

    fn small_config() -> McmcConfig {
        McmcConfig {
            iterations: 60,
            burn_in: 20,
            thin: 2,
            chains: 2,
            seed: 9,
            block_width: 4,
            latent_step: 2,
            prior_only: false,
            audit_interval: 10,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut c = McmcConfig::default();
        c.burn_in = c.iterations;
        assert!(c.validate().is_err());
        let mut c = McmcConfig::default();
        c.thin = 0;
        assert!(c.validate().is_err());
        let mut c = McmcConfig::default();
        c.chains = 0;
        assert!(c.validate().is_err());
        assert!(McmcConfig::default().validate().is_ok());
    }

    #[test]
    fn full_run_produces_expected_draw_counts_and_finite_traces() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let config = small_config();
        let run = run_mcmc(&ctx, &priors, &config, &mut []).unwrap();
        assert_eq!(run.chains.len(), 2);
        for chain in &run.chains {
            assert_eq!(chain.draws_recorded, config.draws_per_chain());
            for trace in &chain.tracked {
                assert_eq!(trace.len(), config.draws_per_chain() as usize);
                assert!(trace.iter().all(|v| v.is_finite()));
            }
        }
        let lp = run.pooled("log_posterior").unwrap();
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn runs_replay_byte_identically() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let config = small_config();
        let a = run_mcmc(&ctx, &priors, &config, &mut []).unwrap();
        let b = run_mcmc(&ctx, &priors, &config, &mut []).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.tracked, cb.tracked);
            assert_eq!(
                ca.final_params.to_flat(&ctx),
                cb.final_params.to_flat(&ctx)
            );
        }
        // Chains differ from each other.
        assert_ne!(a.chains[0].tracked, a.chains[1].tracked);
    }

    #[test]
    fn memory_sink_keeps_every_draw_it_is_offered() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let mut config = small_config();
        config.chains = 1;
        let mut sink = MemorySink::new(1);
        {
            let mut sinks: Vec<&mut dyn DrawSink> = vec![&mut sink];
            run_mcmc(&ctx, &priors, &config, &mut sinks).unwrap();
        }
        assert_eq!(sink.kept.len(), config.draws_per_chain() as usize);
        for (_, p) in &sink.kept {
            assert!(p.validate(&ctx).is_ok());
        }
    }

    #[test]
    fn init_only_mode_snapshots_the_starting_state() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let mut config = small_config();
        config.iterations = 0;
        config.burn_in = 0;
        config.chains = 1;
        let mut sink = MemorySink::new(1);
        {
            let mut sinks: Vec<&mut dyn DrawSink> = vec![&mut sink];
            run_mcmc(&ctx, &priors, &config, &mut sinks).unwrap();
        }
        assert_eq!(sink.kept.len(), 1);
        let fresh = ParameterSet::init(&ctx, &priors).unwrap();
        assert_eq!(sink.kept[0].1.to_flat(&ctx), fresh.to_flat(&ctx));
    }

    #[test]
    fn prior_only_run_skips_data_kernels_but_samples_hypers() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let mut config = small_config();
        config.prior_only = true;
        config.iterations = 80;
        config.burn_in = 20;
        config.thin = 1;
        let run = run_mcmc(&ctx, &priors, &config, &mut []).unwrap();
        for chain in &run.chains {
            // The trajectory is frozen at init in prior mode.
            let fresh = ParameterSet::init(&ctx, &priors).unwrap();
            assert_eq!(
                chain.final_params.traj.y.flat(),
                fresh.traj.y.flat()
            );
            // Scalar probabilities move (prior draws).
            let theta = &chain.tracked[chain
                .tracked_names
                .iter()
                .position(|n| n == "theta")
                .unwrap()];
            let distinct = theta.windows(2).any(|w| w[0] != w[1]);
            assert!(distinct, "removal probability froze in prior mode");
        }
    }

    #[test]
    fn acceptance_rates_are_reported_in_sane_ranges() {
        let (ctx, _params, _ws) = two_county_fixture();
        let priors = Priors::default();
        let mut config = small_config();
        config.iterations = 100;
        config.burn_in = 40;
        config.chains = 1;
        let run = run_mcmc(&ctx, &priors, &config, &mut []).unwrap();
        for (name, rate) in &run.chains[0].acceptance {
            if rate.is_nan() {
                continue; // kernels with no attempts (e.g. admissions off)
            }
            assert!(
                (0.0..=1.0).contains(rate),
                "kernel {name} acceptance {rate} out of range"
            );
        }
        // The latent kernels must actually mix on this fixture.
        let latent_rate = run.chains[0]
            .acceptance
            .iter()
            .find(|(n, _)| n == "latent_y")
            .unwrap()
            .1;
        assert!(latent_rate > 0.01, "latent infections frozen: {latent_rate}");
    }
}
