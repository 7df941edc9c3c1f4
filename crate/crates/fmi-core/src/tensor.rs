//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built from.
//!
//! Every value is `f64`. Kernels that perform multiply-accumulates
//! (`matmul`, the depthwise convolutions) report them to a thread-local
//! counter so that cost formulas can be checked against what actually ran;
//! see [`count_macs`].

use std::cell::Cell;
use std::fmt;

use crate::error::{dim_err, config_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    /// Builds a tensor, rejecting a shape/length mismatch or non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Tensor { shape, data }.finite("Tensor::new")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected a 2-D tensor, got shape {:?}", self.shape)),
        }
    }

    /// Leading dimension; every other axis is folded into the row.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, value: f64) {
        let w = self.shape[1];
        self.data[i * w + j] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    /// Adds a length-`row_len` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Self> {
        let w = self.row_len();
        if bias.len() != w {
            return dim_err(format!("bias of length {} for rows of width {w}", bias.len()));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(w.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Sum over the leading axis.
    pub fn sum_rows(&self) -> Self {
        let w = self.row_len();
        let mut out = vec![0.0; w];
        for chunk in self.data.chunks(w.max(1)) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Tensor { shape: vec![w], data: out }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Stacks tensors along the leading axis; trailing shapes must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return dim_err(format!("concat {:?} with {:?}", first.shape, p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * w..end * w].to_vec() }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return dim_err(format!("column range {start}..{end} of {c}"));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor { shape: vec![r, end - start], data })
    }

    /// Writes `block` into columns `start..` of every row.
    pub fn set_cols(&mut self, start: usize, block: &Tensor) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (br, bc) = block.dims2()?;
        if br != r || start + bc > c {
            return dim_err(format!("cannot place {:?} at column {start} of {:?}", block.shape, self.shape));
        }
        for i in 0..r {
            self.data[i * c + start..i * c + start + bc].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err(format!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Passes the tensor through unchanged, or reports which op produced
    /// a NaN/Inf.
    pub fn finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite value")))
        }
    }
}

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

fn record_macs(n: usize) {
    MACS.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + n as u64));
        }
    });
}

/// Runs `f` and returns how many multiply-accumulates the tensor kernels
/// executed on this thread while it ran. Nested calls each see their own
/// count; the outer count includes the inner one.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MACS.with(|c| c.replace(Some(0)));
    let out = f();
    let inner = MACS.with(|c| c.get()).unwrap_or(0);
    MACS.with(|c| c.set(outer.map(|o| o + inner)));
    (out, inner)
}

/// Matrix product of `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a.data[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bkj) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aik * bkj;
            }
        }
    }
    record_macs(m * k * n);
    Tensor { shape: vec![m, n], data: out }.finite("matmul")
}

/// `aᵀ · b` without materialising the transpose. Not counted: only used on
/// backward paths.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul_tn {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let aki = a.data[p * m + i];
            for j in 0..n {
                out[i * n + j] += aki * b.data[p * n + j];
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.finite("matmul_tn")
}

/// `a · bᵀ`. Not counted: only used on backward paths.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul_nt {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] =
                a.data[i * k..(i + 1) * k].iter().zip(&b.data[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { shape: vec![m, n], data: out }.finite("matmul_nt")
}

/// Numerically stable softmax over the last axis (max-subtracted).
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = x.shape.last().copied().unwrap_or(1).max(1);
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn check_kernel(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, l) = x.dims2()?;
    let (kc, k) = kernel.dims2()?;
    if kc != c {
        return dim_err(format!("kernel has {kc} channels, input has {c}"));
    }
    if k % 2 == 0 {
        return config_err(format!("depthwise kernel width must be odd, got {k}"));
    }
    Ok((c, l, k))
}

/// Per-channel 1-D convolution of `x: [C×L]` with `kernel: [C×K]`, odd `K`,
/// zero "same" padding of `K/2` on each side. Cross-correlation
/// orientation, as in common deep-learning frameworks.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, l, k) = check_kernel(x, kernel)?;
    let half = k / 2;
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let xs = &x.data[ch * l..(ch + 1) * l];
        let ks = &kernel.data[ch * k..(ch + 1) * k];
        for (pos, o) in out[ch * l..(ch + 1) * l].iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &w) in ks.iter().enumerate() {
                if let Some(src) = (pos + j).checked_sub(half) {
                    if src < l {
                        acc += w * xs[src];
                    }
                }
            }
            *o = acc;
        }
    }
    record_macs(c * l * k);
    Tensor { shape: vec![c, l], data: out }.finite("depthwise_conv1d")
}

/// A single output column of [`depthwise_conv1d`]: the `[C]` vector at
/// position `pos`.
pub fn depthwise_conv1d_at(x: &Tensor, kernel: &Tensor, pos: usize) -> Result<Tensor> {
    let (c, l, k) = check_kernel(x, kernel)?;
    if pos >= l {
        return dim_err(format!("position {pos} outside signal of length {l}"));
    }
    let half = k / 2;
    let mut out = vec![0.0; c];
    for (ch, o) in out.iter_mut().enumerate() {
        for j in 0..k {
            if let Some(src) = (pos + j).checked_sub(half) {
                if src < l {
                    *o += kernel.data[ch * k + j] * x.data[ch * l + src];
                }
            }
        }
    }
    record_macs(c * k);
    Tensor { shape: vec![c], data: out }.finite("depthwise_conv1d_at")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x·sigmoid(x)`; also known as SiLU.
pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn swish(x: &Tensor) -> Tensor {
    x.map(swish_scalar)
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Fixed sinusoidal position code: even channels `sin(p/10000^(2i/d))`,
/// odd channels the matching `cos`.
pub fn sinusoidal(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
