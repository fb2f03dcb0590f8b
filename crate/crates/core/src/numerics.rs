//! Dense row-major tensors, the handful of kernels the model needs, and a
//! reproducible random stream.
//!
//! Every reduction sums in ascending index order so results are bit-stable
//! across runs.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dense row-major array of rank 0 to 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > 3 {
            return Err(Error::InvalidTensor(format!("rank {} exceeds 3", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidTensor(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    /// Single-element tensor used for learnable scalars.
    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            dims: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Leading dimension of a matrix (1 for a vector).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            _ => self.dims[0],
        }
    }

    /// Trailing dimension of a matrix (length for a vector).
    pub fn cols(&self) -> usize {
        match self.dims.len() {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[1],
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Slice `i` of a rank-3 tensor as a matrix.
    pub fn slab(&self, i: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "slab needs a rank-3 tensor");
        let step = self.dims[1] * self.dims[2];
        Tensor {
            dims: vec![self.dims[1], self.dims[2]],
            data: self.data[i * step..(i + 1) * step].to_vec(),
        }
    }

    /// Stacks equally shaped matrices into a rank-3 tensor.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidTensor("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.dims.clone(),
                    rhs: t.dims.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.dims,
                rhs: dims.to_vec(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            dims: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Shape {
                op,
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("cannot concatenate zero tensors".into()))?
            .rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].dims.clone(),
                    rhs: p.dims.clone(),
                });
            }
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![rows, width], data)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Tensor {
            dims: vec![rows, width],
            data,
        }
    }

    /// Rows `start..start + count` of a matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            dims: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        }
    }
}

fn check_matrix(t: &Tensor, op: &'static str, other: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.dims.clone(),
            rhs: other.dims.clone(),
        });
    }
    Ok(())
}

/// `out[m×n] = a · b` with explicit (row, col) strides for both operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents keep every strided access in bounds and
    // `out` is a distinct m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul", b)?;
    check_matrix(b, "matmul", a)?;
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    if b.dims[0] != k {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: gemm(&a.data, k, 1, &b.data, n, 1, m, k, n),
    })
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_nt", b)?;
    check_matrix(b, "matmul_nt", a)?;
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[0]);
    if b.dims[1] != k {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: gemm(&a.data, k, 1, &b.data, 1, k, m, k, n),
    })
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_tn", b)?;
    check_matrix(b, "matmul_tn", a)?;
    let (k, m, n) = (a.dims[0], a.dims[1], b.dims[1]);
    if b.dims[0] != k {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: gemm(&a.data, 1, m, &b.data, n, 1, m, k, n),
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix: `v[k] · m[k×n]`.
pub fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let n = m.cols();
    let mut out = vec![0.0; n];
    for (p, &vp) in v.iter().enumerate() {
        for (o, &mv) in out.iter_mut().zip(m.row(p)) {
            *o += vp * mv;
        }
    }
    out
}

/// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is excluded
/// and set to exactly zero.
pub fn softmax_masked_rows(m: &Tensor, causal: bool) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let visible = if causal { (i + 1).min(c) } else { c };
        let row = &m.data[i * c..i * c + visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..i * c + visible];
        let mut total = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor {
        dims: vec![r, c],
        data: out,
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization of one vector with population variance.
pub fn layer_norm(x: &[f64], scale: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(scale.iter().zip(shift))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

/// [`layer_norm`] applied to each row of a matrix.
pub fn layer_norm_rows(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if scale.len() != d || shift.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.dims.clone(),
            rhs: scale.dims.clone(),
        });
    }
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        data.extend(layer_norm(x.row(i), scale.data(), shift.data(), eps));
    }
    Tensor::new(x.dims.clone(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    ReluSquared,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReluSquared => {
                let r = x.max(0.0);
                r * r
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input. The subgradient of
    /// `relu_squared` at 0 is 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::ReluSquared => 2.0 * x.max(0.0),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Seeded ChaCha8 stream. Single owner; hand out independent streams with
/// [`Rng::split`].
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Derives an independent stream and advances this one.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Uniform on `±sqrt(6 / (rows + cols))`.
pub fn init_glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "init_glorot needs positive dims");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor {
        dims: vec![rows, cols],
        data,
    }
}
