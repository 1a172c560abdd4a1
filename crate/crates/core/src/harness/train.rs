//! Behavior-cloning training loop.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{EpisodePool, Sample};
use super::tasks::TaskKind;
use crate::error::{Error, Result};
use crate::model::{HifModel, Losses, ModelConfig};
use crate::motion::{SearchMethod, SearchParams};
use crate::params::{Adam, AdamConfig};
use crate::tensor::{Float, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the motion loss.
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    /// Training episodes generated per task.
    pub episodes_per_task: usize,
    pub search_method: SearchMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda: 0.01,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            steps: 2000,
            seed: 0,
            tasks: vec![TaskKind::DirectionMemory],
            episodes_per_task: 256,
            search_method: SearchMethod::Diamond,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.episodes_per_task == 0 || self.tasks.is_empty() {
            return Err(Error::Config("batch_size, episodes_per_task and tasks must be non-empty".into()));
        }
        if self.model.vocab < TaskKind::ALL.len() {
            return Err(Error::Config(format!(
                "vocab {} cannot hold the {} task instructions",
                self.model.vocab,
                TaskKind::ALL.len()
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn search(&self) -> SearchParams {
        SearchParams {
            search_range: self.model.search_range,
            method: self.search_method,
        }
    }
}

/// One training-log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_all: f64,
    pub l_a: f64,
    pub l_mv: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "step,l_all,l_a,l_mv,wall_ms";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.1}",
            self.step, self.l_all, self.l_a, self.l_mv, self.wall_ms
        )
    }
}

pub struct TrainOutcome {
    pub model: HifModel<f32>,
    pub log: Vec<LogRecord>,
}

/// Worker count: `HIF_THREADS` if set (0 meaning a single deterministic
/// worker), otherwise every available core. `deterministic` forces one.
pub fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    match std::env::var("HIF_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => 1,
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Loss values and per-parameter gradients of one sample.
pub fn sample_gradients<T: Float>(
    model: &HifModel<T>,
    sample: &Sample,
    lambda: f64,
) -> Result<(Losses, Vec<Vec<T>>)> {
    let obs = sample.obs.cast();
    let targets = sample.targets.cast();
    let mut g = Graph::new();
    let vars = model.loss(&mut g, &obs, &targets, lambda)?;
    g.backward(vars.l_all)?;
    let grads = model
        .store
        .ids()
        .map(|id| {
            g.param_grad(id)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); model.store.get(id).numel()])
        })
        .collect();
    Ok((Losses::read(&g, &vars), grads))
}

/// Mean losses and gradients over a batch, accumulated in sample order so
/// the result is independent of the worker count.
pub fn batch_gradients<T: Float>(
    model: &HifModel<T>,
    batch: &[Sample],
    lambda: f64,
    threads: usize,
) -> Result<(Losses, Vec<Vec<T>>)> {
    let mut total: Vec<Vec<T>> = model.store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
    let mut losses = Losses::default();
    for chunk in batch.chunks(threads.max(1)) {
        let results = chunk
            .par_iter()
            .map(|s| sample_gradients(model, s, lambda))
            .collect::<Result<Vec<_>>>()?;
        for (l, grads) in results {
            losses.l_all += l.l_all;
            losses.l_a += l.l_a;
            losses.l_mv += l.l_mv;
            for (acc, g) in total.iter_mut().zip(grads) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let scale = T::of(inv);
    total.iter_mut().flatten().for_each(|v| *v *= scale);
    losses.l_all *= inv;
    losses.l_a *= inv;
    losses.l_mv *= inv;
    Ok((losses, total))
}

/// Trains a fresh model. `on_step` sees every log record as it is produced.
pub fn train(
    config: &TrainConfig,
    threads: usize,
    on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = HifModel::<f32>::new(config.model.clone(), config.seed)?;
    train_from(config, model, threads, on_step)
}

/// Continues training `model` for `config.steps` steps.
pub fn train_from(
    config: &TrainConfig,
    mut model: HifModel<f32>,
    threads: usize,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let pool = thread_pool(threads)?;
    let episodes = pool.install(|| {
        EpisodePool::generate(&config.tasks, config.episodes_per_task, config.seed, &config.search())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1b_u64);
    let mut opt = Adam::new(config.optimizer, &model.store);
    let mut log = Vec::with_capacity(config.steps);
    let start = Instant::now();
    for step in 1..=config.steps {
        let batch: Vec<Sample> = (0..config.batch_size)
            .map(|_| episodes.draw(&mut rng, &model.config))
            .collect();
        let (losses, grads) = pool.install(|| batch_gradients(&model, &batch, config.lambda, threads))?;
        if !losses.l_all.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.update(&mut model.store, &grads)?;
        let rec = LogRecord {
            step,
            l_all: losses.l_all,
            l_a: losses.l_a,
            l_mv: losses.l_mv,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

/// Trailing moving average of a loss column.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_format() {
        let r = LogRecord {
            step: 3,
            l_all: 1.02,
            l_a: 1.0,
            l_mv: 2.0,
            wall_ms: 12.34,
        };
        assert_eq!(r.to_string(), "3,1.020000,1.000000,2.000000,12.3");
        assert_eq!(LogRecord::HEADER.split(',').count(), 5);
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(ma, vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn config_rejects_negative_lambda() {
        let c = TrainConfig {
            lambda: -0.1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
