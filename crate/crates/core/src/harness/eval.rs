//! Closed-loop evaluation in the synthetic renderer.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{episode_seed, make_sample};
use super::tasks::{apply_action, generate_episode_with, Episode, TaskKind, ACTION_DIM, STEP_BUDGET};
use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, HifModel, Losses};
use crate::motion::{estimate_motion_field, SearchMethod, SearchParams};
use crate::policy::StreamingPolicy;
use crate::tensor::{Float, Graph};

/// Keeps evaluation episodes disjoint from training episodes of the same seed.
const EVAL_SALT: u64 = 0xe7a1_0000_0000_0001;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Execute every step of a chunk, then re-plan.
    #[default]
    Chunk,
    /// Execute only the first step of each chunk.
    SingleStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub execution: ExecutionMode,
    /// Steps executed after the decision step.
    pub budget: usize,
    pub search_method: SearchMethod,
    /// Forward passes timed for the latency section.
    pub latency_iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 400,
            seed: 1,
            execution: ExecutionMode::Chunk,
            budget: STEP_BUDGET,
            search_method: SearchMethod::Diamond,
            latency_iters: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskKind,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Median wall-clock milliseconds per streaming control step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    /// One new motion field (zero for modes that ignore motion).
    pub motion_ms: f64,
    /// Model forward pass up to the action chunk.
    pub forward_ms: f64,
    pub step_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub backbone: usize,
    pub hindsight: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EmbeddingMode,
    pub h: usize,
    pub execution: ExecutionMode,
    pub tasks: Vec<TaskResult>,
    /// Mean objective at the decision step of the evaluation episodes.
    pub losses: Losses,
    pub latency: Latency,
    pub tokens: TokenCounts,
}

impl EvalReport {
    pub fn success_rate(&self, task: TaskKind) -> Option<f64> {
        self.tasks.iter().find(|r| r.task == task).map(|r| r.success_rate)
    }
}

/// Episode for trial `i`: consecutive trials share a seed and differ only in
/// the hidden direction, so a history-blind policy wins at most one of each pair.
pub fn trial_episode(task: TaskKind, seed: u64, i: usize, params: &SearchParams) -> Result<Episode> {
    let dir = if i.is_multiple_of(2) { 1 } else { -1 };
    generate_episode_with(task, episode_seed(seed ^ EVAL_SALT, task, (i / 2) as u64), dir, params)
}

/// Plays `ep` up to its decision step, then lets the policy act for
/// `budget` steps. Returns success and the final position.
pub fn rollout<T: Float>(
    policy: &mut StreamingPolicy<T>,
    ep: &Episode,
    execution: ExecutionMode,
    budget: usize,
) -> Result<(bool, (f64, f64))> {
    policy.reset();
    policy.set_task(ep.instruction())?;
    for f in &ep.frames[..=ep.decision_step] {
        policy.observe(f.clone())?;
    }
    let mut pos = ep.positions[ep.decision_step];
    let mut done = 0;
    while done < budget {
        let chunk = policy.act()?;
        let rows = chunk.dims()[0];
        let take = match execution {
            ExecutionMode::Chunk => rows,
            ExecutionMode::SingleStep => 1,
        }
        .min(budget - done);
        for r in 0..take {
            let row = &chunk.data()[r * ACTION_DIM..(r + 1) * ACTION_DIM];
            let a: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            pos = apply_action(pos, &a);
            policy.observe(ep.scene.render(pos))?;
            done += 1;
        }
    }
    Ok((ep.success(pos), pos))
}

/// Replays the scripted expert from the decision step.
pub fn replay_expert(ep: &Episode, budget: usize) -> bool {
    let mut pos = ep.positions[ep.decision_step];
    for s in 0..budget {
        let t = ep.decision_step + s;
        if t >= ep.len() {
            break;
        }
        pos = apply_action(pos, &ep.action(t));
    }
    ep.success(pos)
}

pub fn evaluate_expert(task: TaskKind, config: &EvalConfig, params: &SearchParams) -> Result<TaskResult> {
    let successes = (0..config.trials)
        .into_par_iter()
        .map(|i| trial_episode(task, config.seed, i, params).map(|ep| replay_expert(&ep, config.budget)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&s| s)
        .count();
    Ok(task_result(task, config.trials, successes))
}

fn task_result(task: TaskKind, trials: usize, successes: usize) -> TaskResult {
    TaskResult {
        task,
        trials,
        successes,
        success_rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
    }
}

fn search_params<T: Float>(model: &HifModel<T>, method: SearchMethod) -> SearchParams {
    SearchParams {
        search_range: model.config.search_range,
        method,
    }
}

/// Success rate of `model` on one task.
pub fn evaluate_task<T: Float>(model: &HifModel<T>, task: TaskKind, config: &EvalConfig) -> Result<TaskResult> {
    let params = search_params(model, config.search_method);
    let successes = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let ep = trial_episode(task, config.seed, i, &params)?;
            let mut policy = StreamingPolicy::new(model.clone(), ep.instruction(), params)?;
            rollout(&mut policy, &ep, config.execution, config.budget).map(|(ok, _)| ok)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&s| s)
        .count();
    Ok(task_result(task, config.trials, successes))
}

/// Mean losses over the decision steps of the first `count` trial episodes.
pub fn decision_losses<T: Float>(
    model: &HifModel<T>,
    task: TaskKind,
    config: &EvalConfig,
    lambda: f64,
    count: usize,
) -> Result<Losses> {
    let params = search_params(model, config.search_method);
    let all = (0..count)
        .into_par_iter()
        .map(|i| {
            let ep = trial_episode(task, config.seed, i, &params)?;
            let s = make_sample(&ep, ep.decision_step, &model.config);
            let mut g = Graph::new();
            let vars = model.loss(&mut g, &s.obs.cast(), &s.targets.cast(), lambda)?;
            Ok(Losses::read(&g, &vars))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = Losses::default();
    for l in &all {
        m.l_all += l.l_all;
        m.l_a += l.l_a;
        m.l_mv += l.l_mv;
    }
    let k = all.len().max(1) as f64;
    m.l_all /= k;
    m.l_a /= k;
    m.l_mv /= k;
    Ok(m)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median per-step latency of a streaming policy on a fixed observation:
/// one motion field (the history cache makes older fields free) plus one
/// forward pass. Runs on the calling thread.
pub fn measure_latency<T: Float>(model: &HifModel<T>, iters: usize) -> Result<Latency> {
    if iters == 0 {
        return Err(Error::Config("latency measurement needs at least one iteration".into()));
    }
    let params = search_params(model, SearchMethod::Diamond);
    let ep = trial_episode(TaskKind::DirectionMemory, 0, 0, &params)?;
    let t = ep.decision_step;
    let obs = make_sample(&ep, t, &model.config).obs.cast::<T>();
    // Warm-up.
    model.act(&obs)?;
    let mut motion = Vec::with_capacity(iters);
    let mut forward = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        if model.config.mode.uses_motion() && model.config.h > 0 {
            std::hint::black_box(estimate_motion_field(&ep.frames[t - 1], &ep.frames[t], &params)?);
        }
        motion.push(start.elapsed().as_secs_f64() * 1e3);
        let start = Instant::now();
        std::hint::black_box(model.act(&obs)?);
        forward.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let steps: Vec<f64> = motion.iter().zip(&forward).map(|(a, b)| a + b).collect();
    Ok(Latency {
        motion_ms: median(motion),
        forward_ms: median(forward),
        step_ms: median(steps),
    })
}

/// Full report over `tasks`.
pub fn evaluate<T: Float>(
    model: &HifModel<T>,
    tasks: &[TaskKind],
    config: &EvalConfig,
    lambda: f64,
) -> Result<EvalReport> {
    let results = tasks
        .iter()
        .map(|&t| evaluate_task(model, t, config))
        .collect::<Result<Vec<_>>>()?;
    let first = tasks.first().copied().unwrap_or(TaskKind::DirectionMemory);
    let losses = decision_losses(model, first, config, lambda, config.trials.min(64))?;
    let latency = measure_latency(model, config.latency_iters.max(1))?;
    Ok(EvalReport {
        mode: model.config.mode,
        h: model.config.h,
        execution: config.execution,
        tasks: results,
        losses,
        latency,
        tokens: TokenCounts {
            backbone: model.config.backbone_tokens(),
            hindsight: model.config.hindsight_tokens(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn expert_replay_always_succeeds() {
        let cfg = EvalConfig {
            trials: 40,
            ..EvalConfig::default()
        };
        for task in TaskKind::ALL {
            let r = evaluate_expert(task, &cfg, &SearchParams::default()).unwrap();
            assert_eq!(r.successes, 40, "{task}");
        }
    }

    #[test]
    fn trial_pairs_share_the_decision_frame() {
        let p = SearchParams::default();
        let a = trial_episode(TaskKind::DirectionMemory, 5, 6, &p).unwrap();
        let b = trial_episode(TaskKind::DirectionMemory, 5, 7, &p).unwrap();
        assert_eq!(a.direction, -b.direction);
        assert_eq!(a.frames[a.decision_step], b.frames[b.decision_step]);
    }

    #[test]
    fn rollout_runs_the_budget() {
        let config = ModelConfig {
            width: 64,
            height: 64,
            ..ModelConfig::tiny()
        };
        let model = HifModel::<f64>::new(config, 3).unwrap();
        let p = search_params(&model, SearchMethod::Diamond);
        let ep = trial_episode(TaskKind::DirectionMemory, 0, 0, &p).unwrap();
        let mut pol = StreamingPolicy::new(model, 0, p).unwrap();
        for exec in [ExecutionMode::Chunk, ExecutionMode::SingleStep] {
            let (_, pos) = rollout(&mut pol, &ep, exec, 5).unwrap();
            assert!(pos.0 >= 0.0 && pos.1 >= 0.0);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
