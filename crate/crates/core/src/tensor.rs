//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Every public operation checks shapes up front and rejects non-finite
//! results, so a NaN never travels silently through the network.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient verification.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        ensure_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is known to match.
    fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// 2-D tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let c = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::raw(vec![rows.len(), c], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                reason: "expected a 2-D tensor".into(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    /// Sub-tensor along the leading axis (e.g. one image out of a batch).
    pub fn index_outer(&self, i: usize) -> Result<Tensor<T>> {
        let outer = self.shape[0];
        if i >= outer || self.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "index_outer",
                shape: self.shape.clone(),
                reason: format!("index {i} out of range"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::raw(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            op: "stack",
            shape: vec![],
            reason: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::raw(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn checked<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    ensure_finite(op, &t.data)?;
    Ok(t)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Row-major `c = a · b` with `a` m×k given as rows and `b` k×n.
fn gemm_rows<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a` (m×k) times `b` (k×n).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    checked("matmul", Tensor::raw(vec![m, n], gemm_rows(&a.data, &b.data, m, k, n)))
}

/// `a` (m×k) times the transpose of `b` (n×k).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    checked("matmul_nt", Tensor::raw(vec![m, n], out))
}

/// Transpose of `a` (k×m) times `b` (k×n).
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, _) = a.dims2("matmul_tn")?;
    let (k2, _) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    matmul(&transpose(a)?, b)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::raw(vec![c, r], out))
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    checked(op, Tensor::raw(a.shape.clone(), data))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let data = a.data.iter().map(|&x| x * s).collect();
    checked("scale", Tensor::raw(a.shape.clone(), data))
}

/// Adds a length-`c` vector to every row of an r×c matrix.
pub fn add_row_broadcast<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2("add_row_broadcast")?;
    if bias.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "add_row_broadcast",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut data = x.data.clone();
    for row in data.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v = *v + b;
        }
    }
    checked("add_row_broadcast", Tensor::raw(x.shape.clone(), data))
}

/// Column sums of an r×c matrix, as a length-`c` vector.
pub fn sum_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2("sum_rows")?;
    let mut out = vec![T::zero(); c];
    for row in x.data.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    checked("sum_rows", Tensor::raw(vec![c], out))
}

/// Numerically stable softmax over each row (max-subtracted).
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = m.dims2("softmax_rows")?;
    ensure_finite("softmax_rows", &m.data)?;
    let mut data = m.data.clone();
    for row in data.chunks_mut(c) {
        softmax_in_place(row);
    }
    checked("softmax_rows", Tensor::raw(m.shape.clone(), data))
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(Σ exp(row))`, stable for large magnitudes.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x.shape.last().expect("tensors have rank >= 1");
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::Validation("layer_norm: eps must be positive".into()));
    }
    let mut data = x.data.clone();
    for row in data.chunks_mut(d) {
        let (mean, rstd) = moments(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
    checked("layer_norm", Tensor::raw(x.shape.clone(), data))
}

/// Mean and reciprocal standard deviation `1/sqrt(popvar + eps)` of a row.
pub(crate) fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_finite("gelu", &x.data)?;
    let data = x.data.iter().map(|&v| v * std_normal_cdf(v)).collect();
    checked("gelu", Tensor::raw(x.shape.clone(), data))
}

/// Derivative of GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let data = x
        .data
        .iter()
        .map(|&v| std_normal_cdf(v) + v * inv_sqrt_2pi * (-(v * v) * T::of(0.5)).exp())
        .collect();
    checked("gelu_grad", Tensor::raw(x.shape.clone(), data))
}

/// Columns `start..start+len` of an r×c matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("slice_cols")?;
    if len == 0 || start + len > c {
        return Err(Error::InvalidShape {
            op: "slice_cols",
            shape: x.shape.clone(),
            reason: format!("columns {start}..{} out of range", start + len),
        });
    }
    let mut data = Vec::with_capacity(r * len);
    for row in x.data.chunks(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::raw(vec![r, len], data))
}

pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_cols",
        shape: vec![],
        reason: "nothing to concatenate".into(),
    })?;
    let (r, _) = first.dims2("concat_cols")?;
    let mut total = 0;
    for p in parts {
        let (pr, pc) = p.dims2("concat_cols")?;
        if pr != r {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let pc = p.shape[1];
            data.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
        }
    }
    Ok(Tensor::raw(vec![r, total], data))
}

pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_rows",
        shape: vec![],
        reason: "nothing to concatenate".into(),
    })?;
    let (_, c) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.dims2("concat_rows")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += pr;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::raw(vec![rows, c], data))
}

/// Row `i` of an r×c matrix as a 1×c matrix.
pub fn row<T: Scalar>(x: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("row")?;
    if i >= r {
        return Err(Error::InvalidShape {
            op: "row",
            shape: x.shape.clone(),
            reason: format!("row {i} out of range"),
        });
    }
    Ok(Tensor::raw(vec![1, c], x.data[i * c..(i + 1) * c].to_vec()))
}
