use std::collections::HashMap;
use std::sync::Arc;

use super::{Float, Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Abs(Var),
    Normalize {
        x: Var,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        stride: [usize; 3],
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so the node list
/// is always a topological order and the graph is acyclic by construction.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding `tensor`; differentiable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node,
    /// and the storage is shared with the store rather than copied.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of the last backward root w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.dims(v).to_vec(), g.clone()).ok()
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Gradient for a parameter bound into this graph with [`Graph::param`].
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.grad_slice(self.param_var(id)?)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.dims().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn trailing(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        let bv = self.value(b);
        if bv.numel() != d || bv.last_dim() != d {
            return Err(Error::shape(op, self.dims(x), self.dims(b)));
        }
        Ok(d)
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.trailing("add_bias", x, b)?;
        let bias = self.value(b).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x * s` with `s` broadcast along the last axis of `x`.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.trailing("mul_bias", x, s)?;
        let scale = self.value(s).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(scale).for_each(|(o, &ss)| *o *= ss);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulBias(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape("matmul", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        if dims.len() != 2 {
            return Err(Error::invalid_shape(dims, "transpose needs a matrix"));
        }
        let (r, c) = (dims[0], dims[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self
            .value(x)
            .clone()
            .with_requires_grad(false)
            .reshape(dims)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| {
            let (t, _) = gelu_parts(v);
            T::of(0.5) * v * (T::one() + t)
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.abs());
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// `(x - mu) / sqrt(sigma^2 + eps)` over the last axis.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d < 2 {
            return Err(Error::DegenerateAxis {
                op: "normalize",
                extent: d,
            });
        }
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(NORM_EPS);
        let mut out = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / d);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * r));
            rstd.push(r);
        }
        let out = Tensor::new(xv.dims().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Normalize { x, rstd }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `Kq x d`, `k` and `v`
    /// are `Kk x d`; `mask` (row-major `Kq x Kk`, `true` = visible) is
    /// all-visible when absent.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (dq, dk, dv) = (self.dims(q), self.dims(k), self.dims(v));
        if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
            return Err(Error::shape("attention(q, k)", dq, dk));
        }
        if dk != dv {
            return Err(Error::shape("attention(k, v)", dk, dv));
        }
        let (kq, kk, d) = (dq[0], dk[0], dq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid_shape(dq, format!("{heads} heads do not divide width")));
        }
        if let Some(mask) = mask {
            if mask.len() != kq * kk {
                return Err(Error::shape("attention(mask)", &[mask.len()], &[kq, kk]));
            }
            if let Some(row) = mask.chunks_exact(kk).position(|r| !r.iter().any(|&m| m)) {
                return Err(Error::FullyMaskedRow { row });
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * kq * kk];
        let mut out = vec![T::zero(); kq * d];
        let mut scores = vec![T::zero(); kk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..kq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let visible = mask.is_none_or(|m| m[i * kk + j]);
                    *s = if visible {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                    } else {
                        T::neg_infinity()
                    };
                    max = max.max(*s);
                }
                let p = &mut probs[(h * kq + i) * kk..(h * kq + i + 1) * kk];
                let mut total = T::zero();
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = if s == T::neg_infinity() {
                        T::zero()
                    } else {
                        (s - max).exp()
                    };
                    total += *pj;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = *pj / total;
                    if *pj != T::zero() {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        o.iter_mut().zip(vj).for_each(|(oo, &vv)| *oo += *pj * vv);
                    }
                }
            }
        }
        let out = Tensor::new(vec![kq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Rotary position embedding applied per head to consecutive feature
    /// pairs `(2i, 2i + 1)`, rotating by `pos * base^(-2i / d_head)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 2 || positions.len() != dims[0] {
            return Err(Error::shape("rope", &dims, &[positions.len()]));
        }
        let d = dims[1];
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return Err(Error::invalid_shape(&dims, "rope needs an even per-head width"));
        }
        let half = d / heads / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / (2 * half) as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        let src = self.value(x).data();
        let mut out = src.to_vec();
        rotate_pairs(&mut out, src, d, heads, half, &cos, &sin, false);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(dims, out)?,
            Op::Rope { x, heads, cos, sin },
            rg,
        ))
    }

    /// Valid (unpadded) 3D cross-correlation of a `T x H x W x C` input with
    /// a `kt x kh x kw x C x O` kernel.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3]) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        let geo = Conv3dGeometry::new(&xd, &wd, stride)?;
        let patches = geo.im2col(self.value(x).data());
        let mut out = vec![T::zero(); geo.rows() * geo.out_ch];
        T::gemm(
            geo.rows(),
            geo.cols(),
            geo.out_ch,
            &patches,
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(geo.out_dims(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv3d { x, w, stride }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid_shape(&[], "concat of nothing"))?;
        let tail = self.dims(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let dims = self.dims(p);
            if dims[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.dims(first), dims));
            }
            rows += dims[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(dims, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if len == 0 || start + len > dims[0] {
            return Err(Error::invalid_shape(
                &dims,
                format!("row slice {start}..{} out of range", start + len),
            ));
        }
        let stride: usize = dims[1..].iter().product();
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_dims = dims;
        out_dims[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_dims, data)?, Op::SliceRows { x, start }, rg))
    }

    /// Embedding lookup: selects rows of a `V x d` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let dims = self.dims(table).to_vec();
        if dims.len() != 2 || rows.is_empty() {
            return Err(Error::invalid_shape(&dims, "gather_rows needs a matrix and rows"));
        }
        let d = dims[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= dims[0] {
                return Err(Error::invalid_shape(&dims, format!("row {r} out of range")));
            }
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean absolute deviation over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / T::of(p.numel() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::L1 { pred, target }, rg))
    }

    /// Reverse sweep from the scalar `root`. Gradients stay available until
    /// [`Graph::zero_grad`]; a second sweep before that is rejected.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already populated; call zero_grad before another backward".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got dims {:?}",
                self.dims(root)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut self.grads, i, &g);
            }
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn gelu_parts<T: Float>(v: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let u = c * (v + a * v * v * v);
    let du = c * (T::one() + T::of(3.0) * a * v * v);
    (u.tanh(), du)
}

#[allow(clippy::too_many_arguments)]
fn rotate_pairs<T: Float>(
    out: &mut [T],
    src: &[T],
    d: usize,
    heads: usize,
    half: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let rows = src.len() / d;
    let dh = d / heads;
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..half {
                let (c, mut s) = (cos[r * half + i], sin[r * half + i]);
                if inverse {
                    s = -s;
                }
                let idx = r * d + h * dh + 2 * i;
                let (x0, x1) = (src[idx], src[idx + 1]);
                out[idx] = x0 * c - x1 * s;
                out[idx + 1] = x0 * s + x1 * c;
            }
        }
    }
}

struct Conv3dGeometry {
    in_dims: [usize; 4],
    kernel: [usize; 3],
    stride: [usize; 3],
    out: [usize; 3],
    out_ch: usize,
}

impl Conv3dGeometry {
    fn new(xd: &[usize], wd: &[usize], stride: [usize; 3]) -> Result<Self> {
        if xd.len() != 4 || wd.len() != 5 || xd[3] != wd[3] {
            return Err(Error::shape("conv3d", xd, wd));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || !xd[a].is_multiple_of(stride[a]) {
                return Err(Error::invalid_shape(
                    xd,
                    format!("stride {:?} does not divide the input extents", stride),
                ));
            }
            if wd[a] > xd[a] {
                return Err(Error::shape("conv3d", xd, wd));
            }
            out[a] = (xd[a] - wd[a]) / stride[a] + 1;
        }
        Ok(Conv3dGeometry {
            in_dims: [xd[0], xd[1], xd[2], xd[3]],
            kernel: [wd[0], wd[1], wd[2]],
            stride,
            out,
            out_ch: wd[4],
        })
    }

    fn rows(&self) -> usize {
        self.out.iter().product()
    }

    fn cols(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_dims[3]
    }

    fn out_dims(&self) -> Vec<usize> {
        vec![self.out[0], self.out[1], self.out[2], self.out_ch]
    }

    /// Calls `f(patch_row, patch_col, input_index)` for every tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ih, iw, c] = self.in_dims;
        let [kt, kh, kw] = self.kernel;
        let mut row = 0;
        for ot in 0..self.out[0] {
            for oh in 0..self.out[1] {
                for ow in 0..self.out[2] {
                    let mut col = 0;
                    for a in 0..kt {
                        for b in 0..kh {
                            for e in 0..kw {
                                let t = ot * self.stride[0] + a;
                                let y = oh * self.stride[1] + b;
                                let x = ow * self.stride[2] + e;
                                let base = ((t * ih + y) * iw + x) * c;
                                for ci in 0..c {
                                    f(row, col, base + ci);
                                    col += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let cols = self.cols();
        let mut p = vec![T::zero(); self.rows() * cols];
        self.for_each_tap(|r, c, i| p[r * cols + c] = x[i]);
        p
    }
}

fn slot<'a, T: Float>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn acc<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(s) = slot(nodes, grads, v) {
        s.iter_mut().enumerate().for_each(|(i, x)| *x += f(i));
    }
}

fn propagate<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |j| g[j]);
            acc(nodes, grads, *b, |j| g[j]);
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |j| g[j]);
            acc(nodes, grads, *b, |j| -g[j]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |j| g[j] * vb[j]);
            acc(nodes, grads, *b, |j| g[j] * va[j]);
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, *x, |j| g[j]);
            if let Some(s) = slot(nodes, grads, *b) {
                let d = s.len();
                for row in g.chunks_exact(d) {
                    s.iter_mut().zip(row).for_each(|(o, &r)| *o += r);
                }
            }
        }
        Op::MulBias(x, sc) => {
            let (vx, vs) = (val(*x), val(*sc));
            let d = vs.len();
            acc(nodes, grads, *x, |j| g[j] * vs[j % d]);
            if let Some(s) = slot(nodes, grads, *sc) {
                for (row, xr) in g.chunks_exact(d).zip(vx.chunks_exact(d)) {
                    for k in 0..d {
                        s[k] += row[k] * xr[k];
                    }
                }
            }
        }
        Op::Scale(x, c) => acc(nodes, grads, *x, |j| g[j] * *c),
        Op::MatMul(a, b) => {
            let (da, db) = (nodes[a.0].value.dims(), nodes[b.0].value.dims());
            let (m, k, n) = (da[0], da[1], db[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                T::gemm(m, n, k, g, false, vb, true, T::one(), s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                T::gemm(k, m, n, va, true, g, false, T::one(), s);
            }
        }
        Op::Transpose(x) => {
            let dims = nodes[x.0].value.dims();
            let (r, c) = (dims[0], dims[1]);
            acc(nodes, grads, *x, |j| g[(j % c) * r + j / c]);
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |j| g[j]),
        Op::Gelu(x) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |j| {
                let v = vx[j];
                let (t, du) = gelu_parts(v);
                let half = T::of(0.5);
                g[j] * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
            });
        }
        Op::Abs(x) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |j| {
                let v = vx[j];
                if v > T::zero() {
                    g[j]
                } else if v < T::zero() {
                    -g[j]
                } else {
                    T::zero()
                }
            });
        }
        Op::Normalize { x, rstd } => {
            let xhat = nodes[i].value.data();
            let d = nodes[i].value.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                let inv_d = T::of(1.0 / d as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for k in 0..d {
                        s[r * d + k] += rs * (gr[k] - mean_g - xr[k] * mean_gx);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, probs),
        Op::Rope { x, heads, cos, sin } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let d = nodes[i].value.last_dim();
                let half = d / heads / 2;
                let mut back = g.to_vec();
                rotate_pairs(&mut back, g, d, *heads, half, cos, sin, true);
                s.iter_mut().zip(&back).for_each(|(o, &b)| *o += b);
            }
        }
        Op::Conv3d { x, w, stride } => {
            let geo = Conv3dGeometry::new(nodes[x.0].value.dims(), nodes[w.0].value.dims(), *stride)
                .expect("geometry validated in forward");
            let (rows, cols, oc) = (geo.rows(), geo.cols(), geo.out_ch);
            if nodes[w.0].requires_grad {
                let patches = geo.im2col(val(*x));
                if let Some(s) = slot(nodes, grads, *w) {
                    T::gemm(cols, rows, oc, &patches, true, g, false, T::one(), s);
                }
            }
            if nodes[x.0].requires_grad {
                let mut dp = vec![T::zero(); rows * cols];
                T::gemm(rows, oc, cols, g, false, val(*w), true, T::zero(), &mut dp);
                if let Some(s) = slot(nodes, grads, *x) {
                    geo.for_each_tap(|r, c, idx| s[idx] += dp[r * cols + c]);
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                acc(nodes, grads, p, |j| g[off + j]);
                off += n;
            }
        }
        Op::SliceRows { x, start } => {
            let dims = nodes[x.0].value.dims();
            let stride: usize = dims[1..].iter().product();
            let off = start * stride;
            if let Some(s) = slot(nodes, grads, *x) {
                s[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, &v)| *o += v);
            }
        }
        Op::GatherRows { table, rows } => {
            let d = nodes[table.0].value.last_dim();
            if let Some(s) = slot(nodes, grads, *table) {
                for (k, &r) in rows.iter().enumerate() {
                    s[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(o, &v)| *o += v);
                }
            }
        }
        Op::Sum(x) => acc(nodes, grads, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = T::of(nodes[x.0].value.numel() as f64);
            acc(nodes, grads, *x, |_| g[0] / n);
        }
        Op::L1 { pred, target } => {
            let (p, t) = (val(*pred), val(*target));
            let n = T::of(p.len() as f64);
            let sign = |j: usize| {
                let diff = p[j] - t[j];
                if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            acc(nodes, grads, *pred, |j| g[0] * sign(j) / n);
            acc(nodes, grads, *target, |j| -g[0] * sign(j) / n);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
) {
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (kq, kk, d) = (qv.dims()[0], kv.dims()[0], qv.dims()[1]);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut dq = vec![T::zero(); kq * d];
    let mut dk = vec![T::zero(); kk * d];
    let mut dv = vec![T::zero(); kk * d];
    let mut ds = vec![T::zero(); kk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..kq {
            let p = &probs[(h * kq + i) * kk..(h * kq + i + 1) * kk];
            let go = &g[i * d + off..i * d + off + dh];
            let mut dot = T::zero();
            for j in 0..kk {
                let vj = &vd[j * d + off..j * d + off + dh];
                let dp = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                ds[j] = dp;
                dot += p[j] * dp;
            }
            for j in 0..kk {
                if p[j] == T::zero() {
                    continue;
                }
                let dsj = p[j] * (ds[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += dsj * kd[j * d + off + c];
                    dk[j * d + off + c] += dsj * qd[i * d + off + c];
                    dv[j * d + off + c] += p[j] * go[c];
                }
            }
        }
    }
    for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(s) = slot(nodes, grads, var) {
            s.iter_mut().zip(&delta).for_each(|(o, &x)| *o += x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]).unwrap());
        let b = g.constant(Tensor::zeros([2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn square_and_abs_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(0.0).with_requires_grad(true));
        let a = g.abs(x);
        g.backward(a).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(g.backward(x).is_err());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn l1_values_and_tie_subgradient() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.l1_loss(p, z).unwrap();
        assert_eq!(g.value(l).data(), &[1.5]);
        let same = g.l1_loss(p, p).unwrap();
        assert_eq!(g.value(same).data(), &[0.0]);

        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[2], &[1.0, 0.0]).with_requires_grad(true));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.l1_loss(p, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.5, 0.0]);
        let z = g.constant(Tensor::zeros([3]).unwrap());
        assert!(g.l1_loss(p, z).is_err());
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let k = g.constant(t(&[1, 4], &[1.0, 1.0, -1.0, 0.0]));
        let v = g.constant(t(&[1, 4], &[7.0, 8.0, 9.0, 10.0]));
        let o = g.attention(q, k, v, 1, None).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros([2, 2]).unwrap());
        let mask = [true, true, false, false];
        assert!(matches!(
            g.attention(q, q, q, 1, Some(&mask)),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn conv3d_constant_and_impulse() {
        let mut g = Graph::<f64>::new();
        let c = 3;
        let x = g.constant(Tensor::full([4, 4, 4, c], 1.0).unwrap());
        let w = g.constant(Tensor::full([2, 2, 2, c, 1], 1.0).unwrap());
        let y = g.conv3d(x, w, [2, 2, 2]).unwrap();
        assert_eq!(g.dims(y), &[2, 2, 2, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 8.0 * c as f64));

        let mut impulse = Tensor::<f64>::zeros([4, 4, 4, 1]).unwrap();
        impulse.data_mut()[(4 + 2) * 4 + 3] = 1.0;
        let kernel: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let x = g.constant(impulse);
        let w = g.constant(t(&[2, 2, 2, 1, 1], &kernel));
        let y = g.conv3d(x, w, [2, 2, 2]).unwrap();
        let nonzero: Vec<_> = g.value(y).data().iter().filter(|&&v| v != 0.0).collect();
        // input (t=1, y=2, x=3) hits kernel tap (1, 0, 1) -> index 5 -> value 6.
        assert_eq!(nonzero, vec![&6.0]);

        let bad = g.constant(Tensor::zeros([3, 4, 4, 1]).unwrap());
        assert!(g.conv3d(bad, w, [2, 2, 2]).is_err());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(t(&[3, 8], &vals));
        let y = g.rope(x, 2, &[0, 1, 2], 10_000.0).unwrap();
        for r in 0..3 {
            let n0: f64 = vals[r * 8..r * 8 + 8].iter().map(|v| v * v).sum();
            let n1: f64 = g.value(y).data()[r * 8..r * 8 + 8].iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-12);
        }
        assert_eq!(&g.value(y).data()[..8], &vals[..8]);
    }
}
