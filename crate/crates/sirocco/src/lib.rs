//! Calibration and forecasting engine for a discretized stochastic SIR model
//! on a county adjacency graph.
//!
//! Daily new infections are Poisson draws whose rate couples the current
//! infected count, a log-linear transmission intensity, and the susceptible
//! fraction. Transmission intensity, case detection, testing volume, and
//! hospital admission intensity all carry Gaussian Markov random field
//! (GMRF) effects over (region, day). Calibration runs a hybrid Gibbs /
//! Metropolis-Hastings sampler over latent counts, fields, and scalar
//! parameters; forecasting pushes posterior draws through the forward model
//! to produce case, vaccination, and hospital census ensembles.
//!
//! Module map:
//! - [`graph`]: county adjacency graph and population table
//! - [`precision`]: sparse symmetric precision matrices (CAR, AR(1), Kronecker)
//! - [`gmrf`]: sampling and density evaluation for GMRFs
//! - [`epi`]: compartment bookkeeping and the forward epidemic simulator
//! - [`observation`]: case detection, testing volume, count imputation
//! - [`hospital`]: admission routing, patient flow, census forecasting
//! - [`inference`]: the MCMC engine and its diagnostics
//! - [`forecast`]: covariate, vaccination, and posterior-predictive forecasts
//! - [`io`]: run configuration, input validation, draw persistence

pub mod epi;
pub mod error;
pub mod forecast;
pub mod gmrf;
pub mod graph;
pub mod grid;
pub mod hospital;
pub mod inference;
pub mod io;
pub mod observation;
pub mod precision;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
