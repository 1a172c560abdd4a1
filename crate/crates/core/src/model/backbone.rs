//! Stand-in for the vision-language model: instruction lookup, linear patch
//! embedding, learned foresight/action queries, and a non-causal
//! transformer.

use super::layers::{embedding, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::motion::{Frame, MACROBLOCK};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const PATCH: usize = MACROBLOCK;

/// Foresight motion tokens and action latent tokens read off the query
/// positions.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    pub m_f: Var,
    pub a_f: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BackboneDims {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub k_f: usize,
    /// Zero when the action stream is disabled.
    pub k_a: usize,
    /// Observation frames per input; above one for frame stacking.
    pub frames: usize,
    /// Width of hindsight tokens injected into the sequence, if any.
    pub history_width: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub instr: ParamId,
    pub patch: Linear,
    pub pos: ParamId,
    pub temporal: Option<ParamId>,
    pub foresight: ParamId,
    pub action: Option<ParamId>,
    pub history: Option<Linear>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

/// Pixels of each 16x16 patch, scaled to `[0, 1]`, one row per patch in
/// raster order.
pub fn patch_matrix<T: Float>(frame: &Frame) -> Result<Tensor<T>> {
    let (rows, cols) = frame.grid();
    let c = frame.channels();
    let width = PATCH * PATCH * c;
    let px = frame.pixels();
    let scale = 1.0 / 255.0;
    let mut data = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for q in 0..cols {
            for y in 0..PATCH {
                let start = ((r * PATCH + y) * frame.width() + q * PATCH) * c;
                data.extend(px[start..start + PATCH * c].iter().map(|&v| T::of(v as f64 * scale)));
            }
        }
    }
    Tensor::new(vec![rows * cols, width], data)
}

impl Backbone {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, dims: BackboneDims) -> Result<Self> {
        let d = dims.d;
        let patches = dims.grid.0 * dims.grid.1;
        let instr = store.add("backbone.instr", init.scaled(&[dims.vocab, d], d))?;
        let patch = Linear::new(store, init, "backbone.patch", PATCH * PATCH * dims.channels, d)?;
        let pos = embedding(store, init, "backbone.pos", patches, d)?;
        let temporal = if dims.frames > 1 {
            Some(embedding(store, init, "backbone.temporal", dims.frames, d)?)
        } else {
            None
        };
        let history = match dims.history_width {
            Some(w) => Some(Linear::new(store, init, "backbone.history", w, d)?),
            None => None,
        };
        let foresight = embedding(store, init, "backbone.foresight", dims.k_f, d)?;
        let action = if dims.k_a > 0 {
            Some(embedding(store, init, "backbone.action", dims.k_a, d)?)
        } else {
            None
        };
        let blocks = (0..dims.layers)
            .map(|i| TransformerBlock::new(store, init, &format!("backbone.{i}"), d, dims.heads, dims.hidden))
            .collect::<Result<_>>()?;
        Ok(Backbone {
            instr,
            patch,
            pos,
            temporal,
            foresight,
            action,
            history,
            blocks,
            norm: LayerNorm::new(store, "backbone.norm", d)?,
            dims,
        })
    }

    /// Sequence length seen by the transformer for `history_tokens`
    /// injected hindsight tokens.
    pub fn token_count(&self, history_tokens: usize) -> usize {
        1 + self.dims.frames * self.dims.grid.0 * self.dims.grid.1
            + history_tokens
            + self.dims.k_f
            + self.dims.k_a
    }

    pub fn embed_instruction<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, id: usize) -> Result<Var> {
        if id >= self.dims.vocab {
            return Err(Error::UnknownInstruction {
                id,
                vocab: self.dims.vocab,
            });
        }
        let table = g.param(s, self.instr);
        g.gather_rows(table, &[id])
    }

    /// Patch tokens plus positional embedding; `slot` selects the temporal
    /// embedding when frames are stacked.
    pub fn embed_observation<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        frame: &Frame,
        slot: usize,
    ) -> Result<Var> {
        let want = (self.dims.grid, self.dims.channels);
        if (frame.grid(), frame.channels()) != want {
            return Err(Error::Frame(format!(
                "observation {}x{}x{} does not match the configured {}x{}x{}",
                frame.width(),
                frame.height(),
                frame.channels(),
                want.0 .1 * PATCH,
                want.0 .0 * PATCH,
                want.1
            )));
        }
        let x = g.constant(patch_matrix(frame)?);
        let x = self.patch.forward(g, s, x)?;
        let pos = g.param(s, self.pos);
        let x = g.add(x, pos)?;
        match self.temporal {
            Some(t) => {
                let table = g.param(s, t);
                let rows = vec![slot; self.dims.grid.0 * self.dims.grid.1];
                let e = g.gather_rows(table, &rows)?;
                g.add(x, e)
            }
            None => Ok(x),
        }
    }

    /// Runs `[instruction | patches | (history) | foresight | action]`
    /// through the all-visible transformer. `frames` is oldest first and
    /// must hold exactly the configured number of observations.
    ///
    /// With `history = Some((tokens, visible))` the projected hindsight
    /// tokens join the sequence; `visible = false` hides them as keys from
    /// every other position, which reproduces the history-free output.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        frames: &[&Frame],
        id: usize,
        history: Option<(Var, bool)>,
    ) -> Result<LatentPair> {
        if frames.len() != self.dims.frames {
            return Err(Error::Config(format!(
                "backbone expects {} observation frames, got {}",
                self.dims.frames,
                frames.len()
            )));
        }
        let mut parts = vec![self.embed_instruction(g, s, id)?];
        for (slot, f) in frames.iter().enumerate() {
            parts.push(self.embed_observation(g, s, f, slot)?);
        }
        let prefix: usize = parts.iter().map(|&p| g.dims(p)[0]).sum();
        let mut hidden = None;
        if let Some((tokens, visible)) = history {
            let proj = self
                .history
                .as_ref()
                .ok_or_else(|| Error::Config("backbone was built without a history projection".into()))?;
            let h = proj.forward(g, s, tokens)?;
            let k = g.dims(h)[0];
            if !visible {
                hidden = Some(prefix..prefix + k);
            }
            parts.push(h);
        }
        let fq = g.param(s, self.foresight);
        parts.push(fq);
        if let Some(a) = self.action {
            let aq = g.param(s, a);
            parts.push(aq);
        }
        let mut x = g.concat_rows(&parts)?;
        let len = g.dims(x)[0];
        let mask = hidden.map(|cols| {
            let mut m = vec![true; len * len];
            for row in 0..len {
                if !cols.contains(&row) {
                    for c in cols.clone() {
                        m[row * len + c] = false;
                    }
                }
            }
            m
        });
        for block in &self.blocks {
            x = block.forward(g, s, x, mask.as_deref())?;
        }
        let x = self.norm.forward(g, s, x)?;
        let start = len - self.dims.k_f - self.dims.k_a;
        let m_f = g.slice_rows(x, start, self.dims.k_f)?;
        let a_f = if self.dims.k_a > 0 {
            Some(g.slice_rows(x, start + self.dims.k_f, self.dims.k_a)?)
        } else {
            None
        };
        Ok(LatentPair { m_f, a_f })
    }
}
