//! Sigmoid-gated multinomial logistic mixtures of experts.
//!
//! The crate covers the full convergence-rate study pipeline: model
//! evaluation under four gating mechanisms ([`model`]), synthetic data
//! generation ([`sampling`]), maximum likelihood fitting by generalized EM
//! ([`estimation`]), Voronoi parameter losses and density divergences
//! ([`metrics`]), replicated sample-size sweeps with log-log rate fits
//! ([`experiments`]), and configuration, records, summaries and plots
//! ([`io`]).

pub mod config;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod presets;
pub mod report;
pub mod sampling;
pub mod verify;

pub use error::{Error, Result};
pub use model::{
    expert_probs, pde_residual, sigmoid, Dataset, ExpertAtom, GateKind, Interval, MixingMeasure,
    ParameterBox,
};
