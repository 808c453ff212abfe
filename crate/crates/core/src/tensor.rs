//! Dense f32 tensors and the handful of kernels the transformer stacks need.
//!
//! Reductions always run in a fixed index order so every kernel is
//! bit-reproducible; nothing here is parallel.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Layer-norm epsilon used by both transformer stacks.
pub const LN_EPS: f32 = 1e-5;

/// Row-major dense tensor. `data.len()` always equals the product of `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the last axis (1 for a scalar-shaped tensor).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Unpacks a rank-3 shape as `(b, n, c)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [b, n, c] => Ok((b, n, c)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected rank 3, got {:?}", self.dims),
            )),
        }
    }

    /// Contiguous slice along the leading axis.
    pub fn outer(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.dims[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [f32] {
        let stride = self.data.len() / self.dims[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// `a[M,K] · b[K,P]`.
///
/// Each output element accumulates `a[i,k]·b[k,j]` for `k = 0..K` in order,
/// starting from `0.0`, which is exactly what a naive triple loop does.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.dims[..] {
        [m, k] => (m, k),
        _ => {
            return Err(Error::shape(
                "matmul",
                format!("lhs must be rank 2, got {:?}", a.dims),
            ))
        }
    };
    let (k2, p) = match b.dims[..] {
        [k2, p] => (k2, p),
        _ => {
            return Err(Error::shape(
                "matmul",
                format!("rhs must be rank 2, got {:?}", b.dims),
            ))
        }
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0f32; m * p];
    matmul_slices(&a.data, &b.data, &mut out, m, k, p);
    Ok(Tensor {
        dims: vec![m, p],
        data: out,
    })
}

/// Raw `out[M,P] = a[M,K] · b[K,P]`, overwriting `out`.
pub(crate) fn matmul_slices(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Affine map over the last axis: `x[..., K] · w[K, P] + bias[P]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = x.last_dim();
    let (wk, p) = match w.dims[..] {
        [wk, p] => (wk, p),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("weight must be rank 2, got {:?}", w.dims),
            ))
        }
    };
    if wk != k {
        return Err(Error::shape(
            "linear",
            format!("input width {k} vs weight rows {wk}"),
        ));
    }
    if let Some(b) = bias {
        if b.dims != [p] {
            return Err(Error::shape("linear", format!("bias {:?} vs width {p}", b.dims)));
        }
    }
    let m = x.numel() / k.max(1);
    let mut out = vec![0.0f32; m * p];
    matmul_slices(&x.data, &w.data, &mut out, m, k, p);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(p) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    }
    let mut dims = x.dims.clone();
    *dims.last_mut().expect("rank >= 1") = p;
    Ok(Tensor { dims, data: out })
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let sum = sum as f32;
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis, max-subtracted. The normaliser is accumulated
/// in f64 so long rows still sum to one within 1e-6.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = out.last_dim().max(1);
    for row in out.data.chunks_exact_mut(n) {
        softmax_row(row);
    }
    out
}

pub(crate) fn layernorm_row(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let c = x.len() as f32;
    let mean = x.iter().sum::<f32>() / c;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c;
    let inv = 1.0 / (var + eps).sqrt();
    for (((o, v), g), b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv * g + b;
    }
}

/// Per-vector normalisation over the last axis (biased variance), then affine.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if c == 0 || gain.dims != [c] || bias.dims != [c] {
        return Err(Error::shape(
            "layernorm",
            format!("x {:?}, gain {:?}, bias {:?}", x.dims, gain.dims, bias.dims),
        ));
    }
    let mut out = Tensor::zeros(&x.dims);
    for (src, dst) in x.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        layernorm_row(src, &gain.data, &bias.data, eps, dst);
    }
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// GELU, tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    gelu_in_place(&mut out);
    out
}

pub fn gelu_in_place(x: &mut Tensor) {
    for v in &mut x.data {
        *v = gelu_scalar(*v);
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn rng_normal(rng: &mut Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.normal())
}

/// Uniform `[0, 1)` tensor drawn from `rng`.
pub fn rng_uniform(rng: &mut Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform())
}
