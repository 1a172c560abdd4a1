//! Synthetic history-dependent tasks and their deterministic renderer.
//!
//! Every task builds an episode whose decision-step frame is pixel-identical
//! for both values of the hidden variable, so only motion history can tell
//! the expert's next move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{estimate_motion_field, stack_fields, synth, Frame, MotionField, SearchParams};
use crate::tensor::Tensor;

pub const FRAME_SIZE: usize = 64;
pub const AGENT: usize = 16;
/// Pixels moved per step by a unit action.
pub const MAX_STEP: f64 = 4.0;
pub const ACTION_DIM: usize = 4;
/// Closed-loop step budget from the decision step.
pub const STEP_BUDGET: usize = 16;
/// Length of the expert's post-decision continuation.
pub const CONTINUATION: usize = 12;

const START: (f64, f64) = (24.0, 24.0);
const MARKER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Move out, come back to the start, then keep going the original way.
    DirectionMemory,
    /// Touch one of two static targets, return, then touch the other.
    PressOrder,
    /// Vertical carry-and-return, then continue the carry direction.
    CoverStackAnalog,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::DirectionMemory,
        TaskKind::PressOrder,
        TaskKind::CoverStackAnalog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DirectionMemory => "direction_memory",
            TaskKind::PressOrder => "press_order",
            TaskKind::CoverStackAnalog => "cover_stack_analog",
        }
    }

    /// Instruction id in the task vocabulary.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        TaskKind::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    fn axis(self) -> Axis {
        match self {
            TaskKind::CoverStackAnalog => Axis::Vertical,
            _ => Axis::Horizontal,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    fn along(self, pos: (f64, f64)) -> f64 {
        match self {
            Axis::Horizontal => pos.0,
            Axis::Vertical => pos.1,
        }
    }
}

/// Static scene content: background, agent sprite, and target markers.
#[derive(Clone, Debug)]
pub struct Scene {
    background: Vec<u8>,
    agent: Vec<u8>,
}

impl Scene {
    fn new(task: TaskKind, rng: &mut ChaCha8Rng) -> Self {
        let mut background = synth::smooth_texture(FRAME_SIZE, FRAME_SIZE, 12, rng.random());
        // Darken the background so the bright agent always stands out.
        background.iter_mut().for_each(|v| *v = *v / 2 + 16);
        if task == TaskKind::PressOrder {
            // Targets: flat markers at both ends of the agent's lane. They are
            // part of the background and never change when touched.
            let y0 = START.1 as usize + (AGENT - MARKER) / 2;
            for x0 in [0, FRAME_SIZE - MARKER] {
                for y in y0..y0 + MARKER {
                    for x in x0..x0 + MARKER {
                        background[y * FRAME_SIZE + x] = if (x + y) % 2 == 0 { 250 } else { 150 };
                    }
                }
            }
        }
        let agent = synth::smooth_texture(AGENT, AGENT, 6, rng.random())
            .into_iter()
            .map(|v| v / 2 + 128)
            .collect();
        Scene { background, agent }
    }

    /// Frame with the agent's top-left corner at `pos`, rounded to pixels.
    pub fn render(&self, pos: (f64, f64)) -> Frame {
        let mut px = self.background.clone();
        let (ax, ay) = (pos.0.round() as usize, pos.1.round() as usize);
        for y in 0..AGENT {
            let row = (ay + y) * FRAME_SIZE + ax;
            px[row..row + AGENT].copy_from_slice(&self.agent[y * AGENT..(y + 1) * AGENT]);
        }
        Frame::gray(FRAME_SIZE, FRAME_SIZE, px).expect("fixed frame geometry")
    }
}

fn clamp_pos(pos: (f64, f64)) -> (f64, f64) {
    let max = (FRAME_SIZE - AGENT) as f64;
    (pos.0.clamp(0.0, max), pos.1.clamp(0.0, max))
}

/// Applies one action to a position: the first two components are
/// displacements in units of [`MAX_STEP`] pixels, clipped to one unit.
pub fn apply_action(pos: (f64, f64), action: &[f64]) -> (f64, f64) {
    let dx = action[0].clamp(-1.0, 1.0) * MAX_STEP;
    let dy = action[1].clamp(-1.0, 1.0) * MAX_STEP;
    clamp_pos((pos.0 + dx, pos.1 + dy))
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub task: TaskKind,
    pub seed: u64,
    /// Hidden variable: `+1` or `-1`.
    pub direction: i32,
    pub scene: Scene,
    /// Agent position at each frame.
    pub positions: Vec<(f64, f64)>,
    pub frames: Vec<Frame>,
    /// `T x 4` expert actions; row `t` moves frame `t` to frame `t + 1`.
    pub actions: Tensor<f64>,
    /// Step at which the frame equals the start frame and only history
    /// disambiguates the next move.
    pub decision_step: usize,
    /// `fields[t]` is the motion from frame `t` to frame `t + 1`.
    pub fields: Vec<MotionField>,
    pub search_range: i32,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn instruction(&self) -> usize {
        self.task.id()
    }

    pub fn axis(&self) -> Axis {
        self.task.axis()
    }

    /// Sign the offset from the decision position must have at the end of
    /// a successful rollout.
    pub fn goal_sign(&self) -> i32 {
        match self.task {
            TaskKind::PressOrder => -self.direction,
            _ => self.direction,
        }
    }

    /// Goal predicate on a final position.
    pub fn success(&self, final_pos: (f64, f64)) -> bool {
        let axis = self.axis();
        let offset = axis.along(final_pos) - axis.along(self.positions[self.decision_step]);
        offset * self.goal_sign() as f64 > 0.0
    }

    pub fn action(&self, t: usize) -> [f64; ACTION_DIM] {
        let row = &self.actions.data()[t * ACTION_DIM..(t + 1) * ACTION_DIM];
        [row[0], row[1], row[2], row[3]]
    }

    /// Expert actions `t..t + n`, zero past the end of the script.
    pub fn action_chunk(&self, t: usize, n: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(n * ACTION_DIM);
        for s in t..t + n {
            if s < self.len() {
                data.extend_from_slice(&self.action(s));
            } else {
                data.extend_from_slice(&[0.0; ACTION_DIM]);
            }
        }
        Tensor::new(vec![n, ACTION_DIM], data).expect("consistent chunk dims")
    }

    /// Motion fields `t..t + n` (zero past the last frame).
    pub fn future_fields(&self, t: usize, n: usize) -> Vec<MotionField> {
        let (rows, cols) = self.frames[0].grid();
        (t..t + n)
            .map(|s| self.fields.get(s).cloned().unwrap_or_else(|| MotionField::zeros(rows, cols)))
            .collect()
    }

    /// Ground-truth future motion at step `t` as `n x (G_H * G_W * 2)`.
    pub fn ground_truth_future_mv(&self, t: usize, n: usize) -> Tensor<f64> {
        let (rows, cols) = self.frames[0].grid();
        stack_fields(&self.future_fields(t, n), rows, cols, self.search_range)
            .and_then(|m| m.reshape(vec![n, rows * cols * 2]))
            .expect("fields share the frame grid")
    }

    /// The `h` fields ending at frame `t` (oldest first), zero before the
    /// first frame.
    pub fn history_fields(&self, t: usize, h: usize) -> Vec<MotionField> {
        let (rows, cols) = self.frames[0].grid();
        (0..h)
            .map(|i| {
                // Field ending at frame t - (h - 1 - i).
                let end = (t + 1 + i).checked_sub(h);
                match end {
                    Some(e) if e >= 1 => self.fields[e - 1].clone(),
                    _ => MotionField::zeros(rows, cols),
                }
            })
            .collect()
    }

    /// Normalized `h x G_H x G_W x 2` hindsight tensor at frame `t`.
    pub fn mv_tensor(&self, t: usize, h: usize) -> Tensor<f64> {
        let (rows, cols) = self.frames[0].grid();
        stack_fields(&self.history_fields(t, h), rows, cols, self.search_range)
            .expect("fields share the frame grid")
    }

    /// Frames `t - h ..= t`, repeating the first frame before the episode
    /// start.
    pub fn frame_stack(&self, t: usize, h: usize) -> Vec<Frame> {
        (0..=h)
            .map(|i| self.frames[(t + i).saturating_sub(h)].clone())
            .collect()
    }
}

/// Scripted segment: `steps` repetitions of one action.
struct Segment {
    steps: usize,
    action: [f64; ACTION_DIM],
}

fn seg(steps: usize, dx: f64, dy: f64, grip: f64) -> Segment {
    Segment {
        steps,
        action: [dx, dy, grip, 0.0],
    }
}

/// Script for `task`: (segments up to the decision step, continuation).
fn script(task: TaskKind, dir: f64, still: usize, out: usize) -> (Vec<Segment>, Vec<Segment>) {
    match task {
        TaskKind::DirectionMemory => (
            vec![seg(still, 0.0, 0.0, 0.0), seg(out, dir, 0.0, 0.0), seg(out, -dir, 0.0, 0.0)],
            vec![seg(CONTINUATION, 0.5 * dir, 0.0, 0.0)],
        ),
        TaskKind::PressOrder => (
            vec![
                seg(still, 0.0, 0.0, 0.0),
                seg(out, dir, 0.0, 0.0),
                seg(1, 0.0, 0.0, 1.0),
                seg(out, -dir, 0.0, 0.0),
            ],
            vec![seg(CONTINUATION, -0.5 * dir, 0.0, 0.0), seg(1, 0.0, 0.0, 1.0)],
        ),
        TaskKind::CoverStackAnalog => (
            vec![
                seg(still, 0.0, 0.0, 1.0),
                seg(out, 0.0, dir, 1.0),
                seg(out, 0.0, -dir, 1.0),
            ],
            vec![seg(CONTINUATION, 0.0, 0.5 * dir, 0.0)],
        ),
    }
}

/// Episode with the hidden direction drawn from the seed.
pub fn generate_episode(task: TaskKind, seed: u64, params: &SearchParams) -> Result<Episode> {
    let direction = if ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec).random::<bool>() {
        1
    } else {
        -1
    };
    generate_episode_with(task, seed, direction, params)
}

/// Episode with an explicit hidden direction. Everything else (textures,
/// timing) depends only on `seed`, so the two directions of one seed share
/// a pixel-identical decision frame.
pub fn generate_episode_with(
    task: TaskKind,
    seed: u64,
    direction: i32,
    params: &SearchParams,
) -> Result<Episode> {
    if direction != 1 && direction != -1 {
        return Err(Error::Config(format!("direction must be +1 or -1, got {direction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::new(task, &mut rng);
    let still = rng.random_range(1..=3);
    let out = rng.random_range(2..=3);
    let (before, after) = script(task, direction as f64, still, out);

    let mut actions: Vec<[f64; ACTION_DIM]> = Vec::new();
    for s in &before {
        actions.extend(std::iter::repeat_n(s.action, s.steps));
    }
    let decision_step = actions.len();
    for s in &after {
        actions.extend(std::iter::repeat_n(s.action, s.steps));
    }
    // The final frame has no successor; its action row is zero.
    actions.push([0.0; ACTION_DIM]);

    let mut positions = vec![START];
    for a in &actions[..actions.len() - 1] {
        positions.push(apply_action(*positions.last().unwrap(), a));
    }
    let frames: Vec<Frame> = positions.iter().map(|&p| scene.render(p)).collect();
    let fields = frames
        .windows(2)
        .map(|w| estimate_motion_field(&w[0], &w[1], params))
        .collect::<Result<Vec<_>>>()?;
    let actions = Tensor::new(
        vec![actions.len(), ACTION_DIM],
        actions.into_iter().flatten().collect(),
    )?;
    Ok(Episode {
        task,
        seed,
        direction,
        scene,
        positions,
        frames,
        actions,
        decision_step,
        fields,
        search_range: params.search_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_deterministic() {
        let p = SearchParams::default();
        for task in TaskKind::ALL {
            let a = generate_episode(task, 17, &p).unwrap();
            let b = generate_episode(task, 17, &p).unwrap();
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.fields, b.fields);
        }
    }

    #[test]
    fn decision_frame_is_ambiguous() {
        let p = SearchParams::default();
        for task in TaskKind::ALL {
            for seed in 0..8 {
                let l = generate_episode_with(task, seed, -1, &p).unwrap();
                let r = generate_episode_with(task, seed, 1, &p).unwrap();
                assert_eq!(l.decision_step, r.decision_step);
                let t = l.decision_step;
                assert_eq!(l.frames[t], r.frames[t], "{task} seed {seed}");
                assert_eq!(l.frames[t], l.frames[0]);
                // History differs.
                assert_ne!(l.mv_tensor(t, 8), r.mv_tensor(t, 8));
            }
        }
    }

    #[test]
    fn expert_replay_reaches_goal() {
        let p = SearchParams::default();
        for task in TaskKind::ALL {
            for dir in [-1, 1] {
                let ep = generate_episode_with(task, 3, dir, &p).unwrap();
                assert!(ep.success(*ep.positions.last().unwrap()));
                assert!(!ep.success(ep.positions[ep.decision_step]));
            }
        }
    }

    #[test]
    fn history_window_alignment() {
        let ep = generate_episode_with(TaskKind::DirectionMemory, 5, 1, &SearchParams::default()).unwrap();
        let t = ep.decision_step;
        let hist = ep.history_fields(t, 3);
        assert_eq!(hist[2], ep.fields[t - 1]);
        assert_eq!(hist[0], ep.fields[t - 3]);
        let early = ep.history_fields(1, 3);
        assert!(early[0].is_zero() && early[1].is_zero());
        assert_eq!(early[2], ep.fields[0]);
        let stack = ep.frame_stack(1, 3);
        assert_eq!(stack.len(), 4);
        assert_eq!(stack[0], ep.frames[0]);
        assert_eq!(stack[3], ep.frames[1]);
    }

    #[test]
    fn future_targets_match_extraction() {
        let p = SearchParams::default();
        let ep = generate_episode_with(TaskKind::DirectionMemory, 9, -1, &p).unwrap();
        let t = ep.decision_step;
        let fut = ep.future_fields(t, 8);
        for (i, f) in fut.iter().enumerate() {
            let direct = estimate_motion_field(&ep.frames[t + i], &ep.frames[t + i + 1], &p).unwrap();
            assert_eq!(f, &direct);
        }
        assert_eq!(ep.ground_truth_future_mv(t, 8).dims(), &[8, 32]);
        let tail = ep.future_fields(ep.len() - 2, 4);
        assert!(tail[1..].iter().all(MotionField::is_zero));
    }

    #[test]
    fn task_names_and_ids() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
            assert_eq!(TaskKind::from_id(t.id()).unwrap(), t);
        }
        assert!(matches!("stack".parse::<TaskKind>(), Err(Error::UnknownTask(_))));
    }
}
