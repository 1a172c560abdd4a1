//! Hindsight windows: the last `h` motion fields plus the current keyframe.

use std::collections::VecDeque;

use super::frame::Frame;
use super::search::{estimate_motion_field, MotionField, SearchParams};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Gop {
    /// Oldest first; always exactly `h` entries.
    fields: Vec<MotionField>,
    keyframe: Frame,
    search_range: i32,
}

impl Gop {
    /// Assembles a window from precomputed fields (oldest first), padding
    /// missing leading history with zero fields.
    pub fn from_fields(
        mut fields: Vec<MotionField>,
        keyframe: Frame,
        h: usize,
        search_range: i32,
    ) -> Result<Self> {
        let (rows, cols) = keyframe.grid();
        if let Some(f) = fields.iter().find(|f| (f.rows(), f.cols()) != (rows, cols)) {
            return Err(Error::Frame(format!(
                "motion field grid {}x{} does not match keyframe grid {rows}x{cols}",
                f.rows(),
                f.cols()
            )));
        }
        if fields.len() > h {
            fields.drain(..fields.len() - h);
        }
        let missing = h - fields.len();
        let mut padded = vec![MotionField::zeros(rows, cols); missing];
        padded.append(&mut fields);
        Ok(Gop {
            fields: padded,
            keyframe,
            search_range,
        })
    }

    pub fn fields(&self) -> &[MotionField] {
        &self.fields
    }

    pub fn keyframe(&self) -> &Frame {
        &self.keyframe
    }

    pub fn h(&self) -> usize {
        self.fields.len()
    }

    pub fn search_range(&self) -> i32 {
        self.search_range
    }

    /// `h x rows x cols x 2` tensor of `(dx, dy) / search_range`. The
    /// keyframe is not part of it.
    pub fn mv_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.keyframe.grid();
        stack_fields(&self.fields, rows, cols, self.search_range)
    }
}

/// Stacks fields into a normalized `len x rows x cols x 2` tensor. An empty
/// list yields a single zero field so the tensor stays well formed.
pub fn stack_fields<T: Float>(
    fields: &[MotionField],
    rows: usize,
    cols: usize,
    search_range: i32,
) -> Result<Tensor<T>> {
    let scale = 1.0 / search_range.max(1) as f64;
    let mut data = Vec::with_capacity(fields.len().max(1) * rows * cols * 2);
    for f in fields {
        if (f.rows(), f.cols()) != (rows, cols) {
            return Err(Error::shape("stack_fields", &[f.rows(), f.cols()], &[rows, cols]));
        }
        for v in f.vectors() {
            data.push(T::of(v.dx as f64 * scale));
            data.push(T::of(v.dy as f64 * scale));
        }
    }
    let len = fields.len();
    if len == 0 {
        return Tensor::zeros([1, rows, cols, 2]);
    }
    Tensor::new(vec![len, rows, cols, 2], data)
}

/// Builds a window of length `h` from up to `h + 1` frames (oldest first).
/// Fewer than `h + 1` frames are treated as the start of an episode and the
/// missing history is zero.
pub fn build_gop(frames: &[Frame], h: usize, params: &SearchParams) -> Result<Gop> {
    if frames.len() < 2 {
        return Err(Error::Frame(format!(
            "a window needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if frames.len() > h + 1 {
        return Err(Error::Frame(format!(
            "{} frames supplied for a window of length {h}",
            frames.len()
        )));
    }
    check_geometry(frames)?;
    let fields = frames
        .windows(2)
        .map(|p| estimate_motion_field(&p[0], &p[1], params))
        .collect::<Result<Vec<_>>>()?;
    Gop::from_fields(fields, frames[frames.len() - 1].clone(), h, params.search_range)
}

fn check_geometry(frames: &[Frame]) -> Result<()> {
    let first = &frames[0];
    for (i, f) in frames.iter().enumerate().skip(1) {
        if !f.same_geometry(first) {
            return Err(Error::Frame(format!(
                "frame {i} is {}x{}x{}, expected {}x{}x{}",
                f.width(),
                f.height(),
                f.channels(),
                first.width(),
                first.height(),
                first.channels()
            )));
        }
    }
    Ok(())
}

/// Fields between consecutive frames `t..t+n` of an episode, zero past the
/// final frame.
pub fn future_fields(
    frames: &[Frame],
    t: usize,
    n: usize,
    params: &SearchParams,
) -> Result<Vec<MotionField>> {
    let last = frames
        .last()
        .ok_or_else(|| Error::Frame("empty frame sequence".into()))?;
    let (rows, cols) = last.grid();
    (t..t + n)
        .map(|s| match (frames.get(s), frames.get(s + 1)) {
            (Some(a), Some(b)) => estimate_motion_field(a, b, params),
            _ => Ok(MotionField::zeros(rows, cols)),
        })
        .collect()
}

/// Streaming window: keeps the last `h` fields so each new frame costs a
/// single field estimate.
#[derive(Clone, Debug)]
pub struct MotionHistory {
    h: usize,
    params: SearchParams,
    fields: VecDeque<MotionField>,
    last: Option<Frame>,
}

impl MotionHistory {
    pub fn new(h: usize, params: SearchParams) -> Self {
        MotionHistory {
            h,
            params,
            fields: VecDeque::with_capacity(h + 1),
            last: None,
        }
    }

    pub fn reset(&mut self) {
        self.fields.clear();
        self.last = None;
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn params(&self) -> &SearchParams {
        &self.params
    }

    /// Appends an observation, estimating the field from the previous one.
    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if let Some(prev) = &self.last {
            if !prev.same_geometry(&frame) {
                return Err(Error::Frame("frame geometry changed mid-episode".into()));
            }
            if self.h > 0 {
                self.fields
                    .push_back(estimate_motion_field(prev, &frame, &self.params)?);
                if self.fields.len() > self.h {
                    self.fields.pop_front();
                }
            }
        }
        self.last = Some(frame);
        Ok(())
    }

    pub fn keyframe(&self) -> Option<&Frame> {
        self.last.as_ref()
    }

    /// Current window, zero-padded until `h` fields have been observed.
    pub fn gop(&self) -> Result<Gop> {
        let key = self
            .last
            .clone()
            .ok_or_else(|| Error::Frame("no observation pushed yet".into()))?;
        Gop::from_fields(
            self.fields.iter().cloned().collect(),
            key,
            self.h,
            self.params.search_range,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::search::MotionVector;
    use crate::motion::synth;

    #[test]
    fn identical_pair_gives_zero_field() {
        let f = synth::textured_frame(64, 64, 1);
        let gop = build_gop(&[f.clone(), f], 1, &SearchParams::default()).unwrap();
        assert_eq!(gop.h(), 1);
        assert!(gop.fields()[0].is_zero());
    }

    #[test]
    fn constant_velocity_gives_identical_fields() {
        let frames = synth::translation_sequence(64, 64, (2, 1), 5, 3);
        let gop = build_gop(&frames, 4, &SearchParams::exhaustive(8)).unwrap();
        // Every block whose displaced source lies inside the previous frame
        // sees the true motion, identically in all four fields.
        for f in gop.fields() {
            for r in 1..4 {
                for c in 1..4 {
                    assert_eq!(f.get(r, c), MotionVector::new(2, 1));
                }
            }
        }
    }

    #[test]
    fn episode_start_is_zero_padded() {
        let frames = synth::translation_sequence(64, 64, (3, 0), 3, 4);
        let gop = build_gop(&frames, 8, &SearchParams::default()).unwrap();
        assert_eq!(gop.h(), 8);
        assert!(gop.fields()[..6].iter().all(MotionField::is_zero));
        assert!(gop.fields()[6..].iter().all(|f| !f.is_zero()));
    }

    #[test]
    fn too_few_or_too_many_frames() {
        let f = synth::textured_frame(32, 32, 1);
        assert!(build_gop(std::slice::from_ref(&f), 1, &SearchParams::default()).is_err());
        assert!(build_gop(&[f.clone(), f.clone(), f], 1, &SearchParams::default()).is_err());
    }

    #[test]
    fn mv_tensor_layout_and_normalization() {
        let key = Frame::filled(256, 256, 1, 0).unwrap();
        let gop = Gop::from_fields(vec![], key, 4, 8).unwrap();
        let t: Tensor<f32> = gop.mv_tensor().unwrap();
        assert_eq!(t.dims(), &[4, 16, 16, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let mut vs = vec![MotionVector::ZERO; 4];
        vs[1] = MotionVector::new(8, -8);
        let field = MotionField::from_vectors(2, 2, vs).unwrap();
        let key = Frame::filled(32, 32, 1, 0).unwrap();
        let gop = Gop::from_fields(vec![field], key, 1, 8).unwrap();
        let t: Tensor<f64> = gop.mv_tensor().unwrap();
        assert_eq!(&t.data()[2..4], &[1.0, -1.0]);
    }

    #[test]
    fn streaming_history_matches_batch_window() {
        let frames = synth::translation_sequence(64, 64, (1, 2), 6, 8);
        let params = SearchParams::default();
        let mut hist = MotionHistory::new(3, params);
        for f in &frames {
            hist.push(f.clone()).unwrap();
        }
        let batch = build_gop(&frames[2..], 3, &params).unwrap();
        assert_eq!(hist.gop().unwrap(), batch);
    }
}
