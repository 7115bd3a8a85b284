//! Ratio-shaping kernels for policy optimization, exact tabular analysis,
//! a small on-policy trainer and the experiment harness around them.

pub mod envs;
pub mod error;
pub mod exactmdp;
pub mod harness;
pub mod kernels;
pub mod policy;
pub mod trainer;

pub use envs::{EnvSpec, Environment, GridWorldSpec, PoleBalanceSpec};
pub use error::{Error, Result};
pub use exactmdp::{TabularMDP, TabularPolicy};
pub use harness::{AggregateReport, ExperimentConfig, PropertyReport};
pub use kernels::{KernelFamily, ShapingFunctionSpec, TrustRegionRadius};
pub use policy::{Architecture, ParameterVector, PolicyOutput};
pub use trainer::{TrainConfig, UpdateStats};
