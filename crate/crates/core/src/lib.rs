pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grpo;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod target;

pub use error::{Error, Result};
pub use schedule::{forward_marginal, NoiseSchedule, TimeGrid};
pub use target::{Component, Condition, MixtureTarget, Oracle, ProxQuery};
