//! Dense row-major tensors and the handful of kernels the encoder, metrics and
//! probe code are built from.
//!
//! Every kernel is a pure function with a fixed accumulation order, so results
//! are bit-identical between runs and independent of how callers schedule work
//! across threads. Kernels report non-finite outputs as errors instead of
//! letting NaN/Inf leak downstream.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::RngStream;

/// Floating-point element types the kernels are defined for (`f32` on the
/// main path, `f64` for reference computations and gradient checks).
pub trait Real: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a {expected}-D tensor, got dims {dims:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("axis {axis} out of range for a {ndim}-D tensor")]
    Axis { axis: usize, ndim: usize },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("{0} requires a non-empty dimension")]
    Empty(&'static str),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Row-major dense tensor. `product(dims) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub type DenseTensor = Tensor<f32>;

impl<T: Copy> Tensor<T> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> TensorResult<Self> {
        let expected = dims.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(rows, cols)` of a 2-D tensor.
    pub fn shape2(&self) -> TensorResult<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op: "shape2",
                expected: 2,
                dims: self.dims.clone(),
            }),
        }
    }

    /// Row `i` of a 2-D tensor. Panics when out of range.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.dims[self.dims.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, dims: Vec<usize>) -> TensorResult<Self> {
        Self::from_vec(dims, self.data)
    }

    /// Gathers the listed rows of a 2-D tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> TensorResult<Self> {
        let (n, cols) = self.shape2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::ShapeMismatch {
                    op: "select_rows",
                    lhs: self.dims.clone(),
                    rhs: vec![r],
                });
            }
            data.extend_from_slice(self.row(r));
        }
        Self::from_vec(vec![rows.len(), cols], data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|x| U::from_f64_lossy(x.as_f64()))
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn ensure_finite<T: Real>(data: &[T], op: &'static str) -> TensorResult<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `[m×k] · [k×n] → [m×n]`. Each output element accumulates over `k` in
/// ascending order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
    ensure_finite(&out, "matmul")?;
    Tensor::from_vec(vec![m, n], out)
}

/// `x · w + bias` with `x: [m×k]`, `w: [k×n]`, `bias: [n]`.
pub fn linear<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> TensorResult<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        add_row_vector(&mut y, b)?;
    }
    Ok(y)
}

/// Adds `v` to every row of a 2-D tensor in place.
pub fn add_row_vector<T: Real>(x: &mut Tensor<T>, v: &Tensor<T>) -> TensorResult<()> {
    let (_, cols) = x.shape2()?;
    if v.len() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "add_row_vector",
            lhs: x.dims.clone(),
            rhs: v.dims.clone(),
        });
    }
    for row in x.data.chunks_mut(cols) {
        for (a, &b) in row.iter_mut().zip(&v.data) {
            *a = *a + b;
        }
    }
    Ok(())
}

/// Elementwise `a + b` for equal shapes.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.dims != b.dims {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let data: Vec<T> = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    ensure_finite(&data, "add")?;
    Tensor::from_vec(a.dims.clone(), data)
}

/// Max-subtracted softmax of a slice, evaluated in f64.
pub fn softmax_slice<T: Real>(v: &[T]) -> TensorResult<Vec<T>> {
    if v.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let max = v
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let exps: Vec<f64> = v.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps
        .into_iter()
        .map(|e| T::from_f64_lossy(e / sum))
        .collect())
}

/// Softmax along `axis` of an N-D tensor.
pub fn softmax<T: Real>(v: &Tensor<T>, axis: usize) -> TensorResult<Tensor<T>> {
    let ndim = v.ndim();
    if axis >= ndim {
        return Err(TensorError::Axis { axis, ndim });
    }
    let len = v.dims[axis];
    if len == 0 {
        return Err(TensorError::Empty("softmax"));
    }
    let outer: usize = v.dims[..axis].iter().product();
    let inner: usize = v.dims[axis + 1..].iter().product();
    let mut out = vec![T::zero(); v.len()];
    let mut lane = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            lane.clear();
            lane.extend((0..len).map(|j| v.data[base + j * inner]));
            let s = softmax_slice(&lane)?;
            for (j, x) in s.into_iter().enumerate() {
                out[base + j * inner] = x;
            }
        }
    }
    Tensor::from_vec(v.dims.clone(), out)
}

/// Layer normalization over the last dimension with population variance.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> TensorResult<Tensor<T>> {
    let d = *x.dims.last().ok_or(TensorError::Rank {
        op: "layer_norm",
        expected: 1,
        dims: vec![],
    })?;
    if d == 0 {
        return Err(TensorError::Empty("layer_norm"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.dims.clone(),
            rhs: gamma.dims.clone(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(d) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.as_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            let n = (v.as_f64() - mean) * inv;
            out.push(T::from_f64_lossy(n * g.as_f64() + b.as_f64()));
        }
    }
    ensure_finite(&out, "layer_norm")?;
    Tensor::from_vec(x.dims.clone(), out)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact GELU: `Φ(x) + x · φ(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let out = x.map(|v| T::from_f64_lossy(gelu_scalar(v.as_f64())));
    ensure_finite(&out.data, "gelu")?;
    Ok(out)
}

/// Standard normal variates drawn from `rng`'s stream.
pub fn rand_normal(dims: Vec<usize>, rng: &RngStream) -> Tensor<f32> {
    let n = dims.iter().product();
    let mut g = rng.generator();
    let data = (0..n).map(|_| StandardNormal.sample(&mut g)).collect();
    Tensor { dims, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = rand_normal(vec![4, 6], &RngStream::new(1, 0));
        assert_eq!(matmul(&a, &Tensor::eye(6)).unwrap(), a);
        assert_eq!(matmul(&Tensor::eye(4), &a).unwrap(), a);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_reports_overflow() {
        let a = t2(1, 1, &[f32::MAX]);
        let b = t2(1, 1, &[10.0]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn softmax_symmetric_and_axis() {
        let v = Tensor::from_vec(vec![3], vec![0.0f32; 3]).unwrap();
        for x in softmax(&v, 0).unwrap().data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
        // column-wise softmax of a 2x2
        let m = t2(2, 2, &[0.0, 5.0, 0.0, -5.0]);
        let s = softmax(&m, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-6);
        assert!(matches!(softmax(&m, 2), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn softmax_rejects_nan() {
        let v = Tensor::from_vec(vec![2], vec![0.0f32, f32::NAN]).unwrap();
        assert!(matches!(softmax(&v, 0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::full(vec![2], 1.0f32);
        let b = Tensor::zeros(vec![2]);
        let x = t2(1, 2, &[1.0, 3.0]);
        assert_eq!(layer_norm(&x, &g, &b, 0.0).unwrap().data(), &[-1.0, 1.0]);

        let g4 = Tensor::full(vec![4], 1.0f32);
        let b4 = Tensor::zeros(vec![4]);
        let c = t2(1, 4, &[2.5; 4]);
        assert_eq!(layer_norm(&c, &g4, &b4, 1e-6).unwrap().data(), &[0.0; 4]);
        assert!(layer_norm(&c, &g4, &b4, 0.0).is_err());

        let empty = Tensor::<f32>::zeros(vec![3, 0]);
        let e = Tensor::<f32>::zeros(vec![0]);
        assert!(matches!(
            layer_norm(&empty, &e, &e, 1e-6),
            Err(TensorError::Empty(_))
        ));
    }

    #[test]
    fn gelu_edges() {
        let x = Tensor::from_vec(vec![3], vec![0.0f32, -20.0, 20.0]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1].abs() < 1e-30 && !y.data()[1].is_nan());
        assert_eq!(y.data()[2], 20.0);
    }

    #[test]
    fn rand_normal_streams() {
        let a = rand_normal(vec![16], &RngStream::new(7, 1));
        let b = rand_normal(vec![16], &RngStream::new(7, 1));
        let c = rand_normal(vec![16], &RngStream::new(7, 2));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 2], vec![0.0f32; 3]).is_err());
        let empty = Tensor::<f32>::from_vec(vec![0, 5], vec![]).unwrap();
        assert!(empty.is_empty());
    }
}
