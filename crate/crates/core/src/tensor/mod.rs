//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Tensors are plain data. Differentiation happens on a [`Graph`], which
//! records every operation applied to its [`Var`] handles and replays them
//! backwards from a scalar loss.

pub mod gradcheck;
mod graph;
pub mod io;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Graph, Var};

/// Epsilon added to the variance in every normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Float64),
            other => Err(Error::Format(format!("unknown dtype byte {other:#04x}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

/// Scalar element type of a [`Tensor`]: implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)`
    /// is `k x n`, all row-major. A transposed operand is stored as
    /// `k x m` (resp. `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

impl Float for f32 {
    const DTYPE: DType = DType::Float32;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
        // SAFETY: the assertion above bounds every access the strides imply.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::Float64;

    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
        // SAFETY: the assertion above bounds every access the strides imply.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::invalid_shape(dims, "tensors need at least one axis"));
    }
    if dims.contains(&0) {
        return Err(Error::invalid_shape(dims, "every extent must be at least 1"));
    }
    Ok(dims.iter().product())
}

impl<T: Float> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let numel = check_dims(&dims)?;
        if numel != data.len() {
            return Err(Error::invalid_shape(
                &dims,
                format!("buffer holds {} elements", data.len()),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let numel = check_dims(&dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; numel],
            requires_grad: false,
        })
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if check_dims(&dims)? != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs().as_f64())
                .fold(0.0, f64::max),
        )
    }

    /// Per-row mean and population standard deviation over the last axis.
    ///
    /// Both outputs drop the last axis (a rank-1 input yields extent-1
    /// tensors). The standard deviation uses divisor `d`, without epsilon.
    pub fn layer_norm_stats(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = self.last_dim();
        if d < 2 {
            return Err(Error::DegenerateAxis {
                op: "layer_norm_stats",
                extent: d,
            });
        }
        let out_dims = if self.rank() == 1 {
            vec![1]
        } else {
            self.dims[..self.rank() - 1].to_vec()
        };
        let inv_d = T::of(1.0 / d as f64);
        let mut mu = Vec::with_capacity(self.numel() / d);
        let mut sigma = Vec::with_capacity(self.numel() / d);
        for row in self.data.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            mu.push(mean);
            sigma.push(var.sqrt());
        }
        Ok((Tensor::new(out_dims.clone(), mu)?, Tensor::new(out_dims, sigma)?))
    }

    /// Plain (non-differentiable) matrix product, for oracles and inference helpers.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::shape("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, T::zero(), &mut out);
        Tensor::new(vec![m, n], out)
    }
}
