//! Synthetic tasks, few-shot episodes, the seed-sweep protocol, ablation
//! sweeps and efficiency reporting.

pub mod ablate;
pub mod config;
pub mod efficiency;
pub mod episode;
pub mod experiment;
pub mod synth;

pub use config::{PreparedTask, TaskConfig};
pub use episode::{sample_episode, FewShotEpisode};
pub use experiment::{aggregate, run_experiment, Aggregate, Method, RunMetrics, RunRecord};
