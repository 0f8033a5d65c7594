//! Trace-driven micro-serving simulator for multi-model diffusion workflows.
//!
//! Workflows are composed declaratively ([`dsl`]), lowered into DAGs of
//! independently schedulable model-execution nodes ([`compiler`]), and run
//! against a discrete-event model of a GPU executor cluster ([`engine`]).
//! The scheduler ([`scheduler`]) batches same-model nodes across workflows,
//! routes them to warm executors, adapts intra-node parallelism to cluster
//! availability, and applies SLO-aware admission control. Monolithic
//! whole-workflow serving strategies ([`baselines`]) run on the same engine
//! for comparison. All timing comes from offline latency profiles
//! ([`profiles`]); arrivals come from generated traces ([`workload`]).

pub mod baselines;
pub mod compiler;
pub mod config;
pub mod control;
pub mod data;
pub mod digest;
pub mod dsl;
pub mod engine;
pub mod error;
pub mod log;
pub mod metrics;
pub mod presets;
pub mod profiles;
pub mod scheduler;
pub mod time;
pub mod workload;

pub use error::{BuildError, CompileError, ConfigError, ProfileError, SimError};
pub use time::{ms_to_us, us_to_ms, Micros};
