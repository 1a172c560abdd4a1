//! Integer-pel block matching on the luma plane.
//!
//! A vector `(dx, dy)` for the block at `(x, y)` in the current frame means
//! the block's content sat at `(x - dx, y - dy)` in the previous frame, i.e.
//! current position minus previous position.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frame::{Frame, MACROBLOCK};
use crate::error::{Error, Result};

pub const DEFAULT_SEARCH_RANGE: i32 = 8;

/// Diamond results costing more than this (2 grey levels per pixel) are
/// re-searched exhaustively.
pub const FALLBACK_SAD: u32 = 2 * (MACROBLOCK * MACROBLOCK) as u32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionVector {
    pub dx: i32,
    pub dy: i32,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector { dx: 0, dy: 0 };

    pub fn new(dx: i32, dy: i32) -> Self {
        MotionVector { dx, dy }
    }

    pub fn is_zero(self) -> bool {
        self == Self::ZERO
    }

    fn magnitude2(self) -> i32 {
        self.dx * self.dx + self.dy * self.dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMatch {
    pub mv: MotionVector,
    /// Sum of absolute luma differences.
    pub cost: u32,
}

impl BlockMatch {
    /// Ordering used for every comparison: lower cost, then smaller
    /// `dx^2 + dy^2`, then smaller `dy`, then smaller `dx`.
    fn key(&self) -> (u32, i32, i32, i32) {
        (self.cost, self.mv.magnitude2(), self.mv.dy, self.mv.dx)
    }

    fn better_than(&self, other: &BlockMatch) -> bool {
        self.key() < other.key()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Exhaustive,
    #[default]
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchParams {
    pub search_range: i32,
    pub method: SearchMethod,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            search_range: DEFAULT_SEARCH_RANGE,
            method: SearchMethod::Diamond,
        }
    }
}

impl SearchParams {
    pub fn exhaustive(search_range: i32) -> Self {
        SearchParams {
            search_range,
            method: SearchMethod::Exhaustive,
        }
    }

    pub fn diamond(search_range: i32) -> Self {
        SearchParams {
            search_range,
            method: SearchMethod::Diamond,
        }
    }
}

/// Borrowed luma plane shared by all blocks of one frame pair.
struct Planes<'a> {
    prev: &'a [u8],
    cur: &'a [u8],
    width: usize,
    height: usize,
}

/// Candidate window for one block, clipped so the displaced block stays
/// inside the previous frame.
#[derive(Clone, Copy)]
struct Window {
    x0: i32,
    y0: i32,
    min_dx: i32,
    max_dx: i32,
    min_dy: i32,
    max_dy: i32,
}

impl Window {
    fn contains(&self, dx: i32, dy: i32) -> bool {
        (self.min_dx..=self.max_dx).contains(&dx) && (self.min_dy..=self.max_dy).contains(&dy)
    }
}

impl Planes<'_> {
    fn window(&self, x: usize, y: usize, range: i32) -> Window {
        let (x0, y0) = (x as i32, y as i32);
        let (w, h, b) = (self.width as i32, self.height as i32, MACROBLOCK as i32);
        Window {
            x0,
            y0,
            min_dx: (-range).max(x0 + b - w),
            max_dx: range.min(x0),
            min_dy: (-range).max(y0 + b - h),
            max_dy: range.min(y0),
        }
    }

    fn sad(&self, win: &Window, dx: i32, dy: i32) -> u32 {
        let w = self.width;
        let (cx, cy) = (win.x0 as usize, win.y0 as usize);
        let (px, py) = ((win.x0 - dx) as usize, (win.y0 - dy) as usize);
        let mut total = 0u32;
        for j in 0..MACROBLOCK {
            let c = &self.cur[(cy + j) * w + cx..(cy + j) * w + cx + MACROBLOCK];
            let p = &self.prev[(py + j) * w + px..(py + j) * w + px + MACROBLOCK];
            total += c
                .iter()
                .zip(p)
                .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs())
                .sum::<u32>();
        }
        total
    }

    fn exhaustive(&self, x: usize, y: usize, range: i32) -> BlockMatch {
        let win = self.window(x, y, range);
        let mut best: Option<BlockMatch> = None;
        for dy in win.min_dy..=win.max_dy {
            for dx in win.min_dx..=win.max_dx {
                let cand = BlockMatch {
                    mv: MotionVector::new(dx, dy),
                    cost: self.sad(&win, dx, dy),
                };
                if best.is_none_or(|b| cand.better_than(&b)) {
                    best = Some(cand);
                }
            }
        }
        best.expect("window always contains the zero vector")
    }

    fn diamond(&self, x: usize, y: usize, range: i32) -> BlockMatch {
        const LARGE: [(i32, i32); 8] = [
            (0, -2),
            (-1, -1),
            (1, -1),
            (-2, 0),
            (2, 0),
            (-1, 1),
            (1, 1),
            (0, 2),
        ];
        const SMALL: [(i32, i32); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const SEED_STEP: usize = 4;

        let win = self.window(x, y, range);
        let span = (2 * range + 1) as usize;
        let mut visited = vec![false; span * span];
        let mut probe = |dx: i32, dy: i32, best: &mut Option<BlockMatch>| {
            if !win.contains(dx, dy) {
                return;
            }
            let slot = (dy + range) as usize * span + (dx + range) as usize;
            if std::mem::replace(&mut visited[slot], true) {
                return;
            }
            let cand = BlockMatch {
                mv: MotionVector::new(dx, dy),
                cost: self.sad(&win, dx, dy),
            };
            if best.is_none_or(|b| cand.better_than(&b)) {
                *best = Some(cand);
            }
        };

        // Seeds: the zero vector plus a coarse lattice over the window.
        let mut best = None;
        probe(0, 0, &mut best);
        for dy in (-range..=range).step_by(SEED_STEP) {
            for dx in (-range..=range).step_by(SEED_STEP) {
                probe(dx, dy, &mut best);
            }
        }

        // Large diamond descent until the center wins, then small diamond
        // refinement while it keeps improving.
        for pattern in [&LARGE[..], &SMALL[..]] {
            loop {
                let center = best.expect("zero vector is always probed");
                for &(ox, oy) in pattern {
                    probe(center.mv.dx + ox, center.mv.dy + oy, &mut best);
                }
                if best == Some(center) {
                    break;
                }
            }
        }
        let best = best.unwrap();
        // A descent that ends on a poor match has no reliable basin (e.g. the
        // true source lies outside the clipped window); settle it by full
        // search so the fast path never reports a spurious local minimum.
        if best.cost > FALLBACK_SAD {
            return self.exhaustive(x, y, range);
        }
        best
    }
}

fn check_pair(prev: &Frame, cur: &Frame) -> Result<()> {
    if prev.width() != cur.width() || prev.height() != cur.height() {
        return Err(Error::Frame(format!(
            "frame size mismatch: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height()
        )));
    }
    Ok(())
}

fn check_origin(frame: &Frame, x: usize, y: usize) -> Result<()> {
    if x + MACROBLOCK > frame.width() || y + MACROBLOCK > frame.height() {
        return Err(Error::BlockOutside {
            x,
            y,
            width: frame.width(),
            height: frame.height(),
        });
    }
    Ok(())
}

fn check_range(range: i32) -> Result<()> {
    if range < 0 {
        return Err(Error::Config(format!("negative search range {range}")));
    }
    Ok(())
}

fn with_planes<R>(prev: &Frame, cur: &Frame, f: impl FnOnce(&Planes) -> R) -> Result<R> {
    check_pair(prev, cur)?;
    let (lp, lc) = (prev.luma(), cur.luma());
    Ok(f(&Planes {
        prev: &lp,
        cur: &lc,
        width: cur.width(),
        height: cur.height(),
    }))
}

/// Full search over every candidate in the clipped window. This is the
/// reference the fast path is measured against.
pub fn exhaustive_block_match(
    prev: &Frame,
    cur: &Frame,
    origin: (usize, usize),
    search_range: i32,
) -> Result<BlockMatch> {
    check_range(search_range)?;
    check_origin(cur, origin.0, origin.1)?;
    with_planes(prev, cur, |p| p.exhaustive(origin.0, origin.1, search_range))
}

/// Lattice-seeded large/small diamond descent, with an exhaustive fallback
/// for blocks whose descent ends above [`FALLBACK_SAD`].
pub fn diamond_search(
    prev: &Frame,
    cur: &Frame,
    origin: (usize, usize),
    search_range: i32,
) -> Result<BlockMatch> {
    check_range(search_range)?;
    check_origin(cur, origin.0, origin.1)?;
    with_planes(prev, cur, |p| p.diamond(origin.0, origin.1, search_range))
}

/// Per-macroblock displacement grid between two frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    rows: usize,
    cols: usize,
    vectors: Vec<MotionVector>,
    costs: Vec<u32>,
}

impl MotionField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MotionField {
            rows,
            cols,
            vectors: vec![MotionVector::ZERO; rows * cols],
            costs: vec![0; rows * cols],
        }
    }

    pub fn from_vectors(rows: usize, cols: usize, vectors: Vec<MotionVector>) -> Result<Self> {
        if vectors.len() != rows * cols {
            return Err(Error::Frame(format!(
                "{} vectors for a {rows}x{cols} grid",
                vectors.len()
            )));
        }
        Ok(MotionField {
            rows,
            cols,
            costs: vec![0; vectors.len()],
            vectors,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> MotionVector {
        self.vectors[row * self.cols + col]
    }

    pub fn cost(&self, row: usize, col: usize) -> u32 {
        self.costs[row * self.cols + col]
    }

    pub fn vectors(&self) -> &[MotionVector] {
        &self.vectors
    }

    pub fn costs(&self) -> &[u32] {
        &self.costs
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| v.is_zero())
    }

    pub fn max_abs_component(&self) -> i32 {
        self.vectors
            .iter()
            .map(|v| v.dx.abs().max(v.dy.abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Blocks searched in parallel once the grid is at least this large.
const PARALLEL_BLOCKS: usize = 64;

pub fn estimate_motion_field(prev: &Frame, cur: &Frame, params: &SearchParams) -> Result<MotionField> {
    check_range(params.search_range)?;
    let (rows, cols) = cur.grid();
    with_planes(prev, cur, |p| {
        let search = |idx: usize| {
            let (x, y) = ((idx % cols) * MACROBLOCK, (idx / cols) * MACROBLOCK);
            match params.method {
                SearchMethod::Exhaustive => p.exhaustive(x, y, params.search_range),
                SearchMethod::Diamond => p.diamond(x, y, params.search_range),
            }
        };
        let matches: Vec<BlockMatch> = if rows * cols >= PARALLEL_BLOCKS {
            (0..rows * cols).into_par_iter().map(search).collect()
        } else {
            (0..rows * cols).map(search).collect()
        };
        MotionField {
            rows,
            cols,
            vectors: matches.iter().map(|m| m.mv).collect(),
            costs: matches.iter().map(|m| m.cost).collect(),
        }
    })
}
