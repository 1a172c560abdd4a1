//! Hindsight-modulated joint expert over the foresight-motion and action
//! streams, and the two decoding heads.

use super::layers::{FeedForward, LayerNorm, Linear, Rope, SelfAttention};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Float, Graph, Var};

/// `gamma(h_c) * norm(z) + beta(h_c)`, with both maps linear in `h_c`.
/// Initialized so that `gamma(0) = 1` and `beta(0) = 0`.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdaLn {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_expert: usize, d: usize) -> Result<Self> {
        Ok(AdaLn {
            gamma: Linear::constant(store, &format!("{name}.gamma"), d_expert, d, 1.0)?,
            beta: Linear::constant(store, &format!("{name}.beta"), d_expert, d, 0.0)?,
        })
    }

    /// `z` is `K x d`, `h_c` is `1 x d_expert`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var, h_c: Var) -> Result<Var> {
        let n = g.normalize(z)?;
        let gamma = self.gamma.forward(g, s, h_c)?;
        let beta = self.beta.forward(g, s, h_c)?;
        let y = g.mul_bias(n, gamma)?;
        g.add_bias(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct ExpertBlock {
    pub adaln_attn: AdaLn,
    pub attn: SelfAttention,
    pub adaln_ffn: AdaLn,
    pub ffn_motion: FeedForward,
    pub ffn_action: Option<FeedForward>,
}

/// Normalization used by a block: conditioned, or the plain reference.
#[derive(Clone, Copy)]
enum Norm {
    Conditioned(Var),
    Plain,
}

impl ExpertBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dims: &ExpertDims,
    ) -> Result<Self> {
        let d = dims.d;
        Ok(ExpertBlock {
            adaln_attn: AdaLn::new(store, &format!("{name}.adaln_attn"), dims.d_expert, d)?,
            attn: SelfAttention::new(store, init, &format!("{name}.attn"), d, dims.heads)?,
            adaln_ffn: AdaLn::new(store, &format!("{name}.adaln_ffn"), dims.d_expert, d)?,
            ffn_motion: FeedForward::new(store, init, &format!("{name}.ffn_motion"), d, dims.hidden)?,
            ffn_action: if dims.action_stream {
                Some(FeedForward::new(store, init, &format!("{name}.ffn_action"), d, dims.hidden)?)
            } else {
                None
            },
        })
    }

    fn norm<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ada: &AdaLn, x: Var, norm: Norm) -> Result<Var> {
        match norm {
            Norm::Conditioned(h_c) => ada.forward(g, s, x, h_c),
            Norm::Plain => g.normalize(x),
        }
    }

    fn run<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        m: Var,
        a: Option<Var>,
        norm: Norm,
        rope: Option<Rope>,
    ) -> Result<(Var, Option<Var>)> {
        let k_f = g.dims(m)[0];
        let x = match a {
            Some(a) => g.concat_rows(&[m, a])?,
            None => m,
        };
        let n = self.norm(g, s, &self.adaln_attn, x, norm)?;
        let att = self.attn.forward(g, s, n, None, rope)?;
        let x = g.add(x, att)?;
        let n = self.norm(g, s, &self.adaln_ffn, x, norm)?;
        let (xm, nm) = match a {
            Some(_) => (g.slice_rows(x, 0, k_f)?, g.slice_rows(n, 0, k_f)?),
            None => (x, n),
        };
        let fm = self.ffn_motion.forward(g, s, nm)?;
        let m = g.add(xm, fm)?;
        let a = match a {
            Some(a0) => {
                let k_a = g.dims(a0)[0];
                let ffn = self
                    .ffn_action
                    .as_ref()
                    .ok_or_else(|| Error::Config("expert block has no action stream".into()))?;
                let xa = g.slice_rows(x, k_f, k_a)?;
                let na = g.slice_rows(n, k_f, k_a)?;
                let fa = ffn.forward(g, s, na)?;
                Some(g.add(xa, fa)?)
            }
            None => None,
        };
        Ok((m, a))
    }

    /// AdaLN, joint attention, residual, AdaLN, per-stream FFN, residual.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        m: Var,
        a: Option<Var>,
        h_c: Var,
        rope: Option<Rope>,
    ) -> Result<(Var, Option<Var>)> {
        self.run(g, s, m, a, Norm::Conditioned(h_c), rope)
    }

    /// The same block with plain (unit-gain, zero-offset) normalization in
    /// place of AdaLN: the reference an unconditioned block must match.
    pub fn forward_unconditioned<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        m: Var,
        a: Option<Var>,
        rope: Option<Rope>,
    ) -> Result<(Var, Option<Var>)> {
        self.run(g, s, m, a, Norm::Plain, rope)
    }
}

#[derive(Clone, Debug)]
pub struct ExpertDims {
    pub d: usize,
    pub d_expert: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub action_stream: bool,
    pub rope: bool,
}

#[derive(Clone, Debug)]
pub struct JointExpert {
    pub dims: ExpertDims,
    pub blocks: Vec<ExpertBlock>,
    pub norm_motion: LayerNorm,
    pub norm_action: Option<LayerNorm>,
}

impl JointExpert {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, dims: ExpertDims) -> Result<Self> {
        let blocks = (0..dims.layers)
            .map(|i| ExpertBlock::new(store, init, &format!("expert.{i}"), &dims))
            .collect::<Result<_>>()?;
        Ok(JointExpert {
            blocks,
            norm_motion: LayerNorm::new(store, "expert.norm_motion", dims.d)?,
            norm_action: if dims.action_stream {
                Some(LayerNorm::new(store, "expert.norm_action", dims.d)?)
            } else {
                None
            },
            dims,
        })
    }

    fn rope(&self) -> Option<Rope> {
        self.dims.rope.then(Rope::default)
    }

    /// `(M~_f, A~_f)` from `(M_f, A_f)` under conditioning `h_c`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        m_f: Var,
        a_f: Option<Var>,
        h_c: Var,
    ) -> Result<(Var, Option<Var>)> {
        if a_f.is_some() != self.dims.action_stream {
            return Err(Error::Config("action stream presence does not match the expert".into()));
        }
        let (mut m, mut a) = (m_f, a_f);
        for block in &self.blocks {
            (m, a) = block.forward(g, s, m, a, h_c, self.rope())?;
        }
        let m = self.norm_motion.forward(g, s, m)?;
        let a = match (a, &self.norm_action) {
            (Some(a), Some(n)) => Some(n.forward(g, s, a)?),
            _ => None,
        };
        Ok((m, a))
    }
}

/// Per-token output projections.
#[derive(Clone, Debug)]
pub struct Heads {
    pub action: Option<Linear>,
    pub motion: Linear,
    pub grid: (usize, usize),
}

impl Heads {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        d: usize,
        action_dim: Option<usize>,
        grid: (usize, usize),
    ) -> Result<Self> {
        Ok(Heads {
            action: match action_dim {
                Some(k) => Some(Linear::new(store, init, "heads.action", d, k)?),
                None => None,
            },
            motion: Linear::new(store, init, "heads.motion", d, grid.0 * grid.1 * 2)?,
            grid,
        })
    }

    /// `n x action_dim` chunk, one row per action token.
    pub fn decode_actions<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, a_tilde: Var) -> Result<Var> {
        let head = self
            .action
            .as_ref()
            .ok_or_else(|| Error::Config("model has no action head".into()))?;
        head.forward(g, s, a_tilde)
    }

    /// `n x (G_H * G_W * 2)` rows; each row is one step's motion grid in
    /// the MV tensor's `(row, col, [dx, dy])` layout.
    pub fn decode_motion<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, m_tilde: Var) -> Result<Var> {
        self.motion.forward(g, s, m_tilde)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adaln_identity_and_forced_values() {
        let mut s = ParamStore::<f64>::new();
        let ada = AdaLn::new(&mut s, "a", 2, 3).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let h = g.input(Tensor::zeros([1, 2]).unwrap());
        let y = ada.forward(&mut g, &s, z, h).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (v, e) in g.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }

        s.set(ada.gamma.b.unwrap(), Tensor::full([3], 2.0).unwrap()).unwrap();
        s.set(ada.beta.b.unwrap(), Tensor::full([3], 1.0).unwrap()).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let h = g.input(Tensor::zeros([1, 2]).unwrap());
        let y = ada.forward(&mut g, &s, z, h).unwrap();
        let expect = [-1.4494, 1.0, 3.4494];
        for (v, e) in g.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
    }

    #[test]
    fn per_stream_ffns_do_not_share_storage() {
        let mut s = ParamStore::<f32>::new();
        let dims = ExpertDims {
            d: 8,
            d_expert: 8,
            heads: 2,
            layers: 2,
            hidden: 16,
            action_stream: true,
            rope: true,
        };
        let ex = JointExpert::new(&mut s, &mut Init::new(0), dims).unwrap();
        for b in &ex.blocks {
            let fa = b.ffn_action.as_ref().unwrap();
            let m = [b.ffn_motion.up.w, b.ffn_motion.up.b.unwrap(), b.ffn_motion.down.w, b.ffn_motion.down.b.unwrap()];
            let a = [fa.up.w, fa.up.b.unwrap(), fa.down.w, fa.down.b.unwrap()];
            for x in m {
                for y in a {
                    assert_ne!(x, y);
                    assert!(!s.shares_storage(x, y));
                }
            }
        }
    }
}
