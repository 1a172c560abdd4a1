//! Efficiency and ablation sweeps. Each sweep trains (or reuses) models
//! under one shared budget and reports a plottable table.

use serde::{Deserialize, Serialize};

use super::eval::{decision_losses, evaluate_task, measure_latency, EvalConfig, Latency};
use super::tasks::TaskKind;
use super::train::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, HifModel, ModelConfig, Objective};

pub const LAMBDA_VALUES: [f64; 4] = [0.1, 0.05, 0.01, 0.001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HindsightRow {
    pub h: usize,
    pub success_rate: f64,
    pub latency: Latency,
    pub backbone_tokens: usize,
    pub hindsight_tokens: usize,
    /// Same `h` fed as raw stacked frames instead of motion.
    pub frame_stack_tokens: usize,
    pub frame_stack_latency: Latency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HindsightSweep {
    pub task: TaskKind,
    pub mode: EmbeddingMode,
    pub steps: usize,
    pub rows: Vec<HindsightRow>,
    /// Step latency at the largest `h` over the smallest.
    pub latency_ratio: f64,
    pub frame_stack_latency_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: EmbeddingMode,
    pub success_rate: f64,
    pub final_l_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionAblation {
    pub task: TaskKind,
    pub steps: usize,
    pub rows: Vec<ModeRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub success_rate: f64,
    pub l_a: f64,
    pub l_mv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub task: TaskKind,
    pub steps: usize,
    pub rows: Vec<LambdaRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub l_mv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyReport {
    pub steps: usize,
    pub joint: Vec<CurvePoint>,
    pub motion_only: Vec<CurvePoint>,
    /// Mean motion loss over the last tenth of each run.
    pub joint_final_l_mv: f64,
    pub motion_only_final_l_mv: f64,
}

/// Tagged union written by `hif sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sweep", rename_all = "snake_case")]
pub enum SweepReport {
    Hindsight(HindsightSweep),
    Position(PositionAblation),
    Lambda(LambdaSweep),
    Synergy(SynergyReport),
}

fn first_task(config: &TrainConfig) -> TaskKind {
    config.tasks.first().copied().unwrap_or(TaskKind::DirectionMemory)
}

/// Trains a model, or builds an untrained one when the budget is zero.
fn fit(config: &TrainConfig, threads: usize) -> Result<(HifModel<f32>, Vec<super::train::LogRecord>)> {
    if config.steps == 0 {
        config.validate()?;
        return Ok((HifModel::new(config.model.clone(), config.seed)?, Vec::new()));
    }
    let out = train(config, threads, |_| {})?;
    Ok((out.model, out.log))
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::NAN
    }
}

pub fn sweep_hindsight(
    base: &TrainConfig,
    eval: &EvalConfig,
    h_values: &[usize],
    threads: usize,
) -> Result<HindsightSweep> {
    if h_values.is_empty() {
        return Err(Error::Config("hindsight sweep needs at least one h".into()));
    }
    let task = first_task(base);
    let mut rows = Vec::with_capacity(h_values.len());
    for &h in h_values {
        let mut config = base.clone();
        config.model.h = h;
        let (model, _) = fit(&config, threads)?;
        let success = evaluate_task(&model, task, eval)?.success_rate;
        let latency = measure_latency(&model, eval.latency_iters.max(1))?;
        let stack_config = ModelConfig {
            mode: EmbeddingMode::FrameStackBaseline,
            ..config.model.clone()
        };
        let stack = HifModel::<f32>::new(stack_config.clone(), config.seed)?;
        rows.push(HindsightRow {
            h,
            success_rate: success,
            latency,
            backbone_tokens: model.config.backbone_tokens(),
            hindsight_tokens: model.config.hindsight_tokens(),
            frame_stack_tokens: stack_config.backbone_tokens(),
            frame_stack_latency: measure_latency(&stack, eval.latency_iters.max(1))?,
        });
    }
    let (lo, hi) = (&rows[0], &rows[rows.len() - 1]);
    Ok(HindsightSweep {
        task,
        mode: base.model.mode,
        steps: base.steps,
        latency_ratio: ratio(hi.latency.step_ms, lo.latency.step_ms),
        frame_stack_latency_ratio: ratio(hi.frame_stack_latency.step_ms, lo.frame_stack_latency.step_ms),
        rows,
    })
}

/// Trains one model per mode under the same budget and seed.
pub fn compare_modes(
    base: &TrainConfig,
    eval: &EvalConfig,
    modes: &[EmbeddingMode],
    threads: usize,
) -> Result<PositionAblation> {
    let task = first_task(base);
    let rows = modes
        .iter()
        .map(|&mode| {
            let mut config = base.clone();
            config.model.mode = mode;
            let (model, log) = fit(&config, threads)?;
            Ok(ModeRow {
                mode,
                success_rate: evaluate_task(&model, task, eval)?.success_rate,
                final_l_all: log.last().map_or(f64::NAN, |r| r.l_all),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PositionAblation {
        task,
        steps: base.steps,
        rows,
    })
}

pub fn sweep_position(base: &TrainConfig, eval: &EvalConfig, threads: usize) -> Result<PositionAblation> {
    compare_modes(
        base,
        eval,
        &[EmbeddingMode::ExpertConditioned, EmbeddingMode::VlmInjected],
        threads,
    )
}

pub fn sweep_lambda(base: &TrainConfig, eval: &EvalConfig, lambdas: &[f64], threads: usize) -> Result<LambdaSweep> {
    let task = first_task(base);
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let config = TrainConfig {
                lambda,
                ..base.clone()
            };
            let (model, _) = fit(&config, threads)?;
            let losses = decision_losses(&model, task, eval, lambda, eval.trials.min(64))?;
            Ok(LambdaRow {
                lambda,
                success_rate: evaluate_task(&model, task, eval)?.success_rate,
                l_a: losses.l_a,
                l_mv: losses.l_mv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaSweep {
        task,
        steps: base.steps,
        rows,
    })
}

fn tail_mean(curve: &[CurvePoint]) -> f64 {
    let k = (curve.len() / 10).max(1).min(curve.len());
    if k == 0 {
        return f64::NAN;
    }
    curve[curve.len() - k..].iter().map(|p| p.l_mv).sum::<f64>() / k as f64
}

/// Motion-loss curves with and without the action objective.
pub fn synergy(base: &TrainConfig, threads: usize) -> Result<SynergyReport> {
    if base.steps == 0 {
        return Err(Error::Config("synergy report needs a positive step budget".into()));
    }
    let curve = |objective: Objective| -> Result<Vec<CurvePoint>> {
        let mut config = base.clone();
        config.model.objective = objective;
        let (_, log) = fit(&config, threads)?;
        Ok(log
            .iter()
            .map(|r| CurvePoint {
                step: r.step,
                l_mv: r.l_mv,
            })
            .collect())
    };
    let joint = curve(Objective::Joint)?;
    let motion_only = curve(Objective::MotionOnly)?;
    Ok(SynergyReport {
        steps: base.steps,
        joint_final_l_mv: tail_mean(&joint),
        motion_only_final_l_mv: tail_mean(&motion_only),
        joint,
        motion_only,
    })
}
