//! Directed-evolution domain adaptation at desk scale.
//!
//! A labeled source domain and an unlabeled, shifted target domain go in; a
//! continual-reinforcement loop screens high-confidence pseudo-labeled
//! subsets, evolves pseudo-label variants by mutation and crossover, keeps
//! the fittest candidates in a beam-search replay buffer, and emits an
//! adapted classifier with bootstrap-scored metrics.

pub mod calibration;
pub mod config;
pub mod error;
pub mod evolution;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod synth;
pub mod testkit;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use evolution::{run_dem, DemReport, DemRunResult, LoopConfig};
pub use losses::{LossWeights, Phase};
pub use metrics::{Metric, MetricsReport};
pub use synth::{generate_domain_pair, DomainDataset, ShiftSpec};
