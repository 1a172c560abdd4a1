//! Behavior-cloning samples drawn from pools of scripted episodes.

use rand::Rng;
use rayon::prelude::*;

use super::tasks::{generate_episode, Episode, TaskKind};
use crate::error::Result;
use crate::model::{EmbeddingMode, ModelConfig, Observation, Targets};
use crate::motion::SearchParams;

/// Steps after the decision step that training samples are drawn from;
/// covers every step at which a budgeted rollout re-plans.
pub const SAMPLE_WINDOW: usize = 8;

#[derive(Clone, Debug)]
pub struct Sample {
    pub obs: Observation<f64>,
    pub targets: Targets<f64>,
}

/// Model input and supervision for step `t` of `ep`.
pub fn make_sample(ep: &Episode, t: usize, config: &ModelConfig) -> Sample {
    let frames = match config.mode {
        EmbeddingMode::FrameStackBaseline => ep.frame_stack(t, config.h),
        _ => vec![ep.frames[t].clone()],
    };
    let mv = (config.mode.uses_motion() && config.h > 0).then(|| ep.mv_tensor(t, config.h));
    Sample {
        obs: Observation {
            task_id: ep.instruction(),
            frames,
            mv,
        },
        targets: Targets {
            actions: ep.action_chunk(t, config.n),
            motion: ep.ground_truth_future_mv(t, config.n),
        },
    }
}

/// Decorrelated per-episode seed (SplitMix64 finalizer).
pub fn episode_seed(seed: u64, task: TaskKind, index: u64) -> u64 {
    let mut z = seed ^ ((task.id() as u64) << 56) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct EpisodePool {
    pub episodes: Vec<Episode>,
}

impl EpisodePool {
    /// `per_task` episodes of each task, seeded from `seed`. Generation
    /// runs on the current rayon pool; the result does not depend on it.
    pub fn generate(tasks: &[TaskKind], per_task: usize, seed: u64, params: &SearchParams) -> Result<Self> {
        let jobs: Vec<(TaskKind, u64)> = tasks
            .iter()
            .flat_map(|&t| (0..per_task as u64).map(move |i| (t, episode_seed(seed, t, i))))
            .collect();
        let episodes = jobs
            .into_par_iter()
            .map(|(t, s)| generate_episode(t, s, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodePool { episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// One sample from a uniformly chosen episode, at a uniformly chosen
    /// step in the decision window.
    pub fn draw(&self, rng: &mut impl Rng, config: &ModelConfig) -> Sample {
        let ep = &self.episodes[rng.random_range(0..self.episodes.len())];
        let last = (ep.decision_step + SAMPLE_WINDOW).min(ep.len() - 1);
        let t = rng.random_range(ep.decision_step..=last);
        make_sample(ep, t, config)
    }
}
