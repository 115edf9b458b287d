//! Second-order MAML for task-parameterized continuous control, with
//! diagnostics for tasks where a gradient adaptation step lowers the return.
//!
//! The crate contains the point-mass environment family, a Gaussian MLP
//! policy, trajectory collection, the meta-training loop, a safety-penalized
//! variant of the meta-objective, per-task adaptation analysis and an exact
//! enumeration oracle for small discrete MDPs.

mod error;
mod rng;

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod maml;
pub mod oracle;
pub mod policy;
pub mod rollout;
pub mod safe;

pub use env::{EnvConfig, PointMass, TaskDistribution, TaskFamily, TaskSpec};
pub use error::{Error, Result};
pub use policy::{GaussianMlp, Manifest, PolicyModel, PolicyParams};
pub use rng::{tags, RngStream};
pub use rollout::{Dataset, RolloutConfig, Trajectory};
