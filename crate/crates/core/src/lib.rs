//! Simulation and numerical verification of density-dependent branching
//! processes with genealogy tracking.
//!
//! A population of individuals evolves in continuous time: at population
//! size `n` each individual dies at rate `q(n/K)` and is replaced by a
//! random number of offspring drawn from a density-dependent law `L(n/K)`,
//! where `K` is the carrying capacity. The crate provides
//!
//! - exact event-driven simulation of the population together with its
//!   genealogical forest ([`simulate`], [`forest`]),
//! - the size-biased "spine" variant of the process in which `k`
//!   distinguished lineages reproduce at rate `q·m` ([`simulate::run_spine`]),
//! - planar coalescents extracted from sampled individuals, their pruning
//!   and de-planarization, and reference Kingman coalescents ([`coalescent`]),
//! - Monte Carlo estimators of penalized genealogy moments and the
//!   change-of-measure identities that relate them ([`moments`]),
//! - an exact truncated-generator oracle for the population-size chain,
//!   including Feynman–Kac weighted expectations ([`ctmc`]),
//! - statistical tests of convergence of rescaled genealogies to Kingman's
//!   coalescent ([`kingman`]).
//!
//! Everything is reproducible: all randomness flows from explicit
//! `(seed, stream)` pairs (see [`stats::random_stream`]) and replicate
//! results are reduced in a fixed order regardless of thread count.

pub mod cli;
pub mod coalescent;
pub mod config;
pub mod ctmc;
pub mod forest;
pub mod kingman;
pub mod moments;
pub mod offspring;
pub mod simulate;
pub mod stats;

use simulate::RunStatus;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid density z = {0}: must be positive and finite")]
    InvalidDensity(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate biased law: m_{{{d},{beta}}}({z}) = 0")]
    DegenerateBias { z: f64, d: u32, beta: f64 },
    #[error("individual {0} is not alive")]
    NotAlive(u32),
    #[error("event time {t} precedes current forest time {now}")]
    TimeOrder { t: f64, now: f64 },
    #[error("sample is not sorted in planar order or contains dead individuals")]
    BadSample,
    #[error("coalescent has no events to prune")]
    NoEvents,
    #[error("replicate {rep} ended with status {status:?} before reaching the query time")]
    ReplicateCapped { rep: u64, status: RunStatus },
    #[error(
        "Feynman-Kac exponent {value} exceeds the configured bound {bound} in replicate {rep}"
    )]
    WeightOverflow { rep: u64, value: f64, bound: f64 },
    #[error("unsupported moment functional for k = {k}: {what}")]
    Unsupported { k: usize, what: String },
    #[error("initial state {0} lies outside the generator window")]
    OutsideWindow(u64),
    #[error("offspring mass {mass} enumerable below cap is less than required {required}")]
    TailMass { mass: f64, required: f64 },
    #[error("ODE step size underflow at t = {0}: system too stiff for the explicit integrator")]
    StepUnderflow(f64),
    #[error("uniformization needs {needed} terms, above the cap {cap}")]
    UniformizationCap { needed: u64, cap: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
