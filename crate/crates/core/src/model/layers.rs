//! Building blocks shared by the encoder, backbone and expert.

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

/// `y = x W + b` over the rows of a `K x in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight scaled to variance `1 / in_dim`, zero bias.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.scaled(&[in_dim, out_dim], in_dim))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([out_dim])?)?;
        Ok(Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    /// Weight initialized to zero and bias to `bias`.
    pub fn constant<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: f64,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros([in_dim, out_dim])?)?;
        let b = store.add(format!("{name}.b"), Tensor::full([out_dim], T::of(bias))?)?;
        Ok(Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with a learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], T::one())?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d])?)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.normalize(x)?;
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        let y = g.mul_bias(n, gain)?;
        g.add_bias(y, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden)?,
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, h)
    }
}

/// Rotary embedding settings for an attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rope {
    pub base: f64,
}

impl Default for Rope {
    fn default() -> Self {
        Rope { base: 10_000.0 }
    }
}

/// Multi-head self-attention with separate query/key/value projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(SelfAttention {
            q: Linear::new(store, init, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, init, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, init, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, init, &format!("{name}.out"), d, d)?,
            heads,
        })
    }

    /// `mask` is row-major `K x K` with `true` meaning visible; `None` is
    /// the all-visible (non-causal) mask. With `rope`, queries and keys are
    /// rotated by their row index.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mask: Option<&[bool]>,
        rope: Option<Rope>,
    ) -> Result<Var> {
        let mut q = self.q.forward(g, s, x)?;
        let mut k = self.k.forward(g, s, x)?;
        let v = self.v.forward(g, s, x)?;
        if let Some(r) = rope {
            let positions: Vec<usize> = (0..g.dims(x)[0]).collect();
            q = g.rope(q, self.heads, &positions, r.base)?;
            k = g.rope(k, self.heads, &positions, r.base)?;
        }
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, s, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            attn: SelfAttention::new(store, init, &format!("{name}.attn"), d, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d, hidden)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let n = self.ln_attn.forward(g, s, x)?;
        let a = self.attn.forward(g, s, n, mask, None)?;
        let x = g.add(x, a)?;
        let n = self.ln_ffn.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, n)?;
        g.add(x, f)
    }
}

/// Learned `rows x d` table initialized with small normal values.
pub fn embedding<T: Float>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    rows: usize,
    d: usize,
) -> Result<ParamId> {
    store.add(name, init.normal(&[rows, d], 0.02))
}
