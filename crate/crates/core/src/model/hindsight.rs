//! Hindsight motion encoder: 3D blocking of the MV tensor, a small ViT with
//! a CLS token, and the projection to the conditioning vector.

use super::layers::{embedding, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const BLOCK: usize = 2;

/// History length after padding odd `h` with one leading zero field.
pub fn padded_len(h: usize) -> usize {
    h + h % BLOCK
}

/// `1 + (h/2)(G_H/2)(G_W/2)`, with odd `h` rounded up.
pub fn token_count(h: usize, grid: (usize, usize)) -> usize {
    1 + padded_len(h) / BLOCK * (grid.0 / BLOCK) * (grid.1 / BLOCK)
}

#[derive(Clone, Debug)]
pub struct HindsightEncoder {
    pub h: usize,
    pub grid: (usize, usize),
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub cond: Linear,
}

impl HindsightEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        h: usize,
        grid: (usize, usize),
        d: usize,
        d_expert: usize,
        heads: usize,
        layers: usize,
        hidden: usize,
    ) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("hindsight encoder needs h >= 1".into()));
        }
        if !grid.0.is_multiple_of(BLOCK) || !grid.1.is_multiple_of(BLOCK) {
            return Err(Error::Config(format!(
                "macroblock grid {}x{} must be even for 2x2x2 blocking",
                grid.0, grid.1
            )));
        }
        let fan_in = BLOCK * BLOCK * BLOCK * 2;
        let conv_w = store.add(
            "hindsight.patch.w",
            init.scaled(&[BLOCK, BLOCK, BLOCK, 2, d], fan_in),
        )?;
        let conv_b = store.add("hindsight.patch.b", Tensor::zeros([d])?)?;
        let cls = embedding(store, init, "hindsight.cls", 1, d)?;
        let pos = embedding(store, init, "hindsight.pos", token_count(h, grid), d)?;
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, init, &format!("hindsight.{i}"), d, heads, hidden))
            .collect::<Result<_>>()?;
        Ok(HindsightEncoder {
            h,
            grid,
            conv_w,
            conv_b,
            cls,
            pos,
            blocks,
            norm: LayerNorm::new(store, "hindsight.norm", d)?,
            cond: Linear::new(store, init, "hindsight.cond", d, d_expert)?,
        })
    }

    pub fn token_count(&self) -> usize {
        token_count(self.h, self.grid)
    }

    /// `h x G_H x G_W x 2` motion tensor to `(h/2)(G_H/2)(G_W/2) x d` block
    /// tokens in (time, row, col) order.
    pub fn patchify3d<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, mv: Var) -> Result<Var> {
        let want = [self.h, self.grid.0, self.grid.1, 2];
        if g.dims(mv) != want {
            return Err(Error::shape("patchify3d", g.dims(mv), &want));
        }
        let mv = if self.h % BLOCK == 1 {
            let pad = g.constant(Tensor::zeros([1, self.grid.0, self.grid.1, 2])?);
            g.concat_rows(&[pad, mv])?
        } else {
            mv
        };
        let w = g.param(s, self.conv_w);
        let y = g.conv3d(mv, w, [BLOCK; 3])?;
        let d = g.dims(y)[3];
        let tokens = self.token_count() - 1;
        let y = g.reshape(y, [tokens, d])?;
        let b = g.param(s, self.conv_b);
        g.add_bias(y, b)
    }

    /// CLS followed by the block tokens, position-embedded and passed
    /// through the transformer stack.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, patches: Var) -> Result<Var> {
        let cls = g.param(s, self.cls);
        let x = g.concat_rows(&[cls, patches])?;
        let pos = g.param(s, self.pos);
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, s, x, None)?;
        }
        self.norm.forward(g, s, x)
    }

    /// `h_c` as a `1 x d_expert` row, from the CLS token only.
    pub fn condition<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let cls = g.slice_rows(tokens, 0, 1)?;
        self.cond.forward(g, s, cls)
    }

    /// Tokens and conditioning vector for one motion tensor.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        mv: Var,
    ) -> Result<(Var, Var)> {
        let patches = self.patchify3d(g, s, mv)?;
        let tokens = self.encode(g, s, patches)?;
        let h_c = self.condition(g, s, tokens)?;
        Ok((tokens, h_c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(h: usize) -> (ParamStore<f64>, HindsightEncoder) {
        let mut s = ParamStore::new();
        let enc = HindsightEncoder::new(&mut s, &mut Init::new(3), h, (4, 4), 16, 16, 2, 1, 32).unwrap();
        (s, enc)
    }

    #[test]
    fn token_count_formula() {
        assert_eq!(token_count(4, (16, 16)), 1 + 128);
        assert_eq!(token_count(8, (4, 4)), 1 + 16);
        assert_eq!(token_count(1, (4, 4)), token_count(2, (4, 4)));
        for h in 1..=16 {
            assert_eq!(token_count(h, (4, 4)), 1 + h.div_ceil(2) * 4);
        }
    }

    #[test]
    fn zero_motion_gives_zero_block_tokens() {
        let (s, enc) = encoder(4);
        let mut g = Graph::new();
        let mv = g.input(Tensor::zeros([4, 4, 4, 2]).unwrap());
        let p = enc.patchify3d(&mut g, &s, mv).unwrap();
        assert_eq!(g.dims(p), &[8, 16]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_touches_one_block_token() {
        let (s, enc) = encoder(4);
        let mut t = Tensor::zeros([4, 4, 4, 2]).unwrap();
        // time 3, row 1, col 2, dy
        t.data_mut()[((3 * 4 + 1) * 4 + 2) * 2 + 1] = 1.0;
        let mut g = Graph::new();
        let mv = g.input(t);
        let p = enc.patchify3d(&mut g, &s, mv).unwrap();
        let nonzero: Vec<usize> = g
            .value(p)
            .data()
            .chunks(16)
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect();
        // Block (time 1, row 0, col 1) in (time, row, col) order.
        assert_eq!(nonzero, vec![4 + 1]);
    }

    #[test]
    fn odd_history_is_padded() {
        let (s, enc) = encoder(3);
        let mut g = Graph::new();
        let mv = g.input(Tensor::full([3, 4, 4, 2], 0.5).unwrap());
        let (tokens, h_c) = enc.forward(&mut g, &s, mv).unwrap();
        assert_eq!(g.dims(tokens), &[1 + 2 * 4, 16]);
        assert_eq!(g.dims(h_c), &[1, 16]);
    }

    #[test]
    fn wrong_layout_rejected() {
        let (s, enc) = encoder(4);
        let mut g = Graph::new();
        let mv = g.input(Tensor::zeros([4, 2, 4, 2]).unwrap());
        assert!(enc.patchify3d(&mut g, &s, mv).is_err());
    }
}
