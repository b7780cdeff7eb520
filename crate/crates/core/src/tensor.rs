//! Dense row-major `f32` tensors and the handful of kernels the encoders need.
//!
//! Every kernel is a pure function with a fixed accumulation order, so the
//! same input always produces the same bits. Row-parallel kernels split work
//! by output row only; each row is still reduced sequentially.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Copies rows `start..end` of a matrix view.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.rows() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("row range {start}..{end} out of bounds"),
            });
        }
        let c = self.cols();
        Tensor::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Copies columns `start..end` of a matrix view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let c = self.cols();
        if start >= end || end > c {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("column range {start}..{end} out of bounds"),
            });
        }
        let mut out = Vec::with_capacity(self.rows() * (end - start));
        for r in 0..self.rows() {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor::new(vec![self.rows(), end - start], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

/// Accumulator width for [`matmul_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Accumulate {
    #[default]
    F32,
    F64,
}

fn check_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a matrix"),
        });
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_with(a, b, Accumulate::F32)
}

pub fn matmul_with(a: &Tensor, b: &Tensor, acc: Accumulate) -> Result<Tensor> {
    check_matrix(a, "matmul")?;
    check_matrix(b, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        match acc {
            Accumulate::F32 => {
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            Accumulate::F64 => {
                let mut wide = vec![0.0f64; n];
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in wide.iter_mut().zip(b_row) {
                        *o += av as f64 * bv as f64;
                    }
                }
                for (o, w) in out_row.iter_mut().zip(wide) {
                    *o = w as f32;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`. This is the layout of linear-layer
/// weights stored as `[out, in]`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_t")?;
    check_matrix(b, "matmul_t")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_t",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b.data[j * k..(j + 1) * k]);
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_t")
}

/// Sequential dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `x · wᵀ + bias`, the affine map of a linear layer with `w: out×in`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul_t(x, w)?;
    if let Some(b) = bias {
        add_row_inplace(&mut y, b)?;
    }
    Ok(y)
}

/// Adds the vector `b` to every row of `x`.
pub fn add_row_inplace(x: &mut Tensor, b: &Tensor) -> Result<()> {
    let c = x.cols();
    if b.len() != c {
        return Err(Error::Shape {
            op: "add_row",
            lhs: x.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    for row in x.data.chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)?.ensure_finite("add")
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(())
}

pub fn scale(x: &Tensor, s: f32) -> Result<Tensor> {
    let data = x.data.iter().map(|v| v * s).collect();
    Tensor::new(x.shape.clone(), data)?.ensure_finite("scale")
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("layer_norm")
}

/// Softmax along each row, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.data.clone();
    for row in out.chunks_mut(x.cols()) {
        softmax_inplace(row);
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("softmax_rows")
}

pub(crate) fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Divides each row by its L2 norm. Rows with norm below `1e-12` are rejected.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.data.clone();
    for (i, row) in out.chunks_mut(x.cols()).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::ZeroNorm {
                op: "l2_normalize_rows",
                row: i,
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("l2_normalize_rows")
}

/// MLP activation variants found in CLIP checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluVariant {
    /// `x·Φ(x)` with the exact error function.
    #[default]
    Erf,
    /// The `tanh` approximation.
    Tanh,
    /// `x·σ(1.702x)`, used by the original OpenAI weights.
    Quick,
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    gelu_with(x, GeluVariant::Erf)
}

pub fn gelu_with(x: &Tensor, variant: GeluVariant) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| gelu_scalar(v, variant)).collect();
    Tensor::new(x.shape.clone(), data)?.ensure_finite("gelu")
}

pub(crate) fn gelu_scalar(v: f32, variant: GeluVariant) -> f32 {
    match variant {
        GeluVariant::Erf => {
            let x = v as f64;
            (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
        }
        GeluVariant::Tanh => {
            let x = v as f64;
            let k = (2.0 / std::f64::consts::PI).sqrt();
            (0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())) as f32
        }
        GeluVariant::Quick => v / (1.0 + (-1.702 * v).exp()),
    }
}
