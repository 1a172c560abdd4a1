//! Simulated desk tasks, training, evaluation and sweeps.

pub mod dataset;
pub mod eval;
pub mod sweep;
pub mod tasks;
pub mod train;

pub use dataset::{make_sample, EpisodePool, Sample, SAMPLE_WINDOW};
pub use tasks::{generate_episode, generate_episode_with, Episode, TaskKind};
pub use train::{train, train_from, worker_threads, LogRecord, TrainConfig, TrainOutcome};
pub use eval::{evaluate, evaluate_expert, measure_latency, rollout, EvalConfig, EvalReport, ExecutionMode, Latency};
pub use sweep::{sweep_hindsight, sweep_lambda, sweep_position, synergy, SweepReport, LAMBDA_VALUES};
