//! Bayesian multi-dipole estimation from M/EEG-style linear sensor data.
//!
//! A small number of point sources (equivalent current dipoles) with unknown
//! count, locations, and moments generates the measurements through a known
//! linear forward operator. Dipole moments are conditionally Gaussian and
//! marginalized analytically; an adaptive sequential Monte Carlo sampler
//! covers the remaining variables: the dipole count (via reversible jump
//! moves), the locations (via local moves), and - in the hierarchical
//! variant - the moment prior width `sigma_q` under a log-uniform
//! hyperprior, which makes the inference stable across order-of-magnitude
//! misspecifications of the source strength.
//!
//! The library is the primary interface; start from the runnable examples:
//!
//! ```text
//! cargo run --release --example grid_and_proposals
//! cargo run --release --example synthetic_dataset
//! cargo run --release --example localize_fixed_prior
//! cargo run --release --example localize_hyperprior
//! cargo run --release --example tempering_trace
//! cargo run --release --example exact_small_posterior
//! cargo run --release --example prior_scale_sweep
//! ```
//!
//! A thin `sesame` binary wraps the same pipelines as `simulate`,
//! `localize`, and `evaluate` subcommands for batch work.

pub mod cli;
pub mod error;
pub mod estimates;
pub mod eval;
pub mod forward;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod source_space;

pub use error::{Error, Result};
pub use estimates::PosteriorSummary;
pub use eval::Method;
pub use forward::Leadfield;
pub use model::{DipoleConfig, NoiseModel, PriorConfig, SigmaMode};
pub use sampler::{SamplerConfig, SmcState};
pub use simulate::SimScenario;
pub use source_space::SourceGrid;
