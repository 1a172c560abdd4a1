//! Streaming inference: feed one observation per control step and get the
//! next action chunk, with motion history cached between calls.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, HifModel, Observation};
use crate::motion::{Frame, MotionHistory, SearchParams};
use crate::tensor::{Float, Tensor};

pub struct StreamingPolicy<T: Float> {
    model: HifModel<T>,
    task_id: usize,
    history: MotionHistory,
    frames: VecDeque<Frame>,
}

impl<T: Float> StreamingPolicy<T> {
    pub fn new(model: HifModel<T>, task_id: usize, search: SearchParams) -> Result<Self> {
        if task_id >= model.config.vocab {
            return Err(Error::UnknownInstruction {
                id: task_id,
                vocab: model.config.vocab,
            });
        }
        if search.search_range != model.config.search_range {
            return Err(Error::Config(format!(
                "search range {} differs from the model's {}",
                search.search_range, model.config.search_range
            )));
        }
        let h = if model.config.mode.uses_motion() { model.config.h } else { 0 };
        Ok(StreamingPolicy {
            history: MotionHistory::new(h, search),
            task_id,
            frames: VecDeque::new(),
            model,
        })
    }

    pub fn model(&self) -> &HifModel<T> {
        &self.model
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    /// Forgets all history, e.g. at an episode boundary.
    pub fn reset(&mut self) {
        self.history.reset();
        self.frames.clear();
    }

    pub fn set_task(&mut self, task_id: usize) -> Result<()> {
        if task_id >= self.model.config.vocab {
            return Err(Error::UnknownInstruction {
                id: task_id,
                vocab: self.model.config.vocab,
            });
        }
        self.task_id = task_id;
        Ok(())
    }

    /// Records an observation; costs one motion-field estimate.
    pub fn observe(&mut self, frame: Frame) -> Result<()> {
        let c = &self.model.config;
        if (frame.width(), frame.height(), frame.channels()) != (c.width, c.height, c.channels) {
            return Err(Error::Frame(format!(
                "observation {}x{}x{} does not match the model's {}x{}x{}",
                frame.width(),
                frame.height(),
                frame.channels(),
                c.width,
                c.height,
                c.channels
            )));
        }
        let keep = c.backbone_frames();
        self.history.push(frame.clone())?;
        self.frames.push_back(frame);
        while self.frames.len() > keep {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Model input for the current step.
    pub fn observation(&self) -> Result<Observation<T>> {
        let keyframe = self
            .frames
            .back()
            .ok_or_else(|| Error::Frame("no observation recorded yet".into()))?;
        let c = &self.model.config;
        let frames = if c.mode == EmbeddingMode::FrameStackBaseline {
            // Repeat the oldest frame until the stack is full.
            let oldest = self.frames.front().unwrap();
            let missing = c.backbone_frames() - self.frames.len();
            std::iter::repeat_n(oldest, missing)
                .chain(self.frames.iter())
                .cloned()
                .collect()
        } else {
            vec![keyframe.clone()]
        };
        let mv = if self.history.h() > 0 {
            Some(self.history.gop()?.mv_tensor()?)
        } else {
            None
        };
        Ok(Observation {
            task_id: self.task_id,
            frames,
            mv,
        })
    }

    /// `n x action_dim` chunk for the current step.
    pub fn act(&self) -> Result<Tensor<T>> {
        self.model.act(&self.observation()?)
    }

    /// `observe` followed by `act`.
    pub fn step(&mut self, frame: Frame) -> Result<Tensor<T>> {
        self.observe(frame)?;
        self.act()
    }
}
