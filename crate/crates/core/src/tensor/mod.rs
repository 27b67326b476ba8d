//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Tape`]: values
//! pushed onto a tape as leaves are tracked, and every op applied to a tracked
//! [`Var`] is recorded so that [`Tape::backward`] can replay it in reverse.

mod tape;

pub use tape::{Gradients, Tape, Var};

use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over an empty extent")]
    EmptyReduction { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward needs a loss recorded on the tape")]
    Untracked,
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Reduction scope for [`Tensor::sum`] and [`Tensor::max`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    All,
    Axis(usize),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, Layout::N, &other.data, Layout::N, &mut out, false);
        Self::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(&[n, m], out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.split_axis(axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                softmax_strided(&mut out, base, len, inner);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn sum(&self, scope: Reduce) -> Result<Self> {
        self.reduce(scope, "sum", |slice| slice.iter().sum::<f64>())
    }

    /// Maximum; the first occurrence wins ties.
    pub fn max(&self, scope: Reduce) -> Result<Self> {
        self.reduce(scope, "max", |slice| slice[argmax(slice)])
    }

    fn reduce(&self, scope: Reduce, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        match scope {
            Reduce::All => {
                if self.data.is_empty() {
                    return Err(TensorError::EmptyReduction { op });
                }
                Ok(Self::scalar(f(&self.data)))
            }
            Reduce::Axis(axis) => {
                let (outer, len, inner) = self.split_axis(axis, op)?;
                if len == 0 {
                    return Err(TensorError::EmptyReduction { op });
                }
                let mut out = Vec::with_capacity(outer * inner);
                let mut buf = vec![0.0; len];
                for o in 0..outer {
                    for i in 0..inner {
                        for (a, slot) in buf.iter_mut().enumerate() {
                            *slot = self.data[(o * len + a) * inner + i];
                        }
                        out.push(f(&buf));
                    }
                }
                let mut shape = self.shape.clone();
                shape.remove(axis);
                Self::new(&shape, out)
            }
        }
    }

    /// Decomposes the shape around `axis` into (outer, axis extent, inner).
    pub(crate) fn split_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_strided(data: &mut [f64], base: usize, len: usize, stride: usize) {
    if len == 0 {
        return;
    }
    let mut peak = f64::NEG_INFINITY;
    for a in 0..len {
        peak = peak.max(data[base + a * stride]);
    }
    let mut total = 0.0;
    for a in 0..len {
        let e = (data[base + a * stride] - peak).exp();
        data[base + a * stride] = e;
        total += e;
    }
    for a in 0..len {
        data[base + a * stride] /= total;
    }
}

/// Storage order of a gemm operand.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Row-major as given.
    N,
    /// Use the transpose of the row-major matrix.
    T,
}

/// `out (+)= op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted at the top.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);

        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expect = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.matmul(&q).unwrap(), expect);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn gemm_transposed_layouts_agree_with_explicit_transpose() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 3], vec![0.5, 1.0, -1.0, 2.0, 2.0, 0.0]).unwrap();
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        let mut out = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), Layout::N, b.data(), Layout::T, &mut out, false);
        assert_eq!(out, direct.data());

        let direct = a.transpose().unwrap().matmul(&b).unwrap();
        let mut out = vec![0.0; 9];
        gemm(3, 2, 3, a.data(), Layout::T, b.data(), Layout::N, &mut out, false);
        assert_eq!(out, direct.data());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, -5.0]]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
        assert!(t.softmax(2).is_err());
    }

    #[test]
    fn reductions() {
        let v = Tensor::vector(vec![0.4, 0.4, 0.1, 0.1]);
        assert!((v.sum(Reduce::All).unwrap().item().unwrap() - 1.0).abs() < 1e-15);

        let m = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.5, 0.1]]).unwrap();
        assert_eq!(m.max(Reduce::Axis(0)).unwrap().data(), &[0.5, 0.1]);
        assert_eq!(m.sum(Reduce::Axis(1)).unwrap().shape(), &[2]);
    }

    #[test]
    fn empty_reductions_are_errors() {
        let e = Tensor::zeros(&[0]);
        assert_eq!(
            e.max(Reduce::All).unwrap_err(),
            TensorError::EmptyReduction { op: "max" }
        );
        let e = Tensor::zeros(&[3, 0]);
        assert!(matches!(
            e.max(Reduce::Axis(1)),
            Err(TensorError::EmptyReduction { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn data_length_checked() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::DataLength { expected: 4, actual: 3, .. })
        ));
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop((a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(m, k, n)| (arb_matrix(m, k), arb_matrix(k, n)))) {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let c = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a.data()[i * k + t] * b.data()[t * n + j];
                    }
                    prop_assert!((c.data()[i * n + j] - acc).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(x in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| arb_matrix(r, c)), shift in -50.0..50.0f64) {
            let p = x.softmax(1).unwrap();
            let q = x.map(|v| v + shift).softmax(1).unwrap();
            let cols = x.shape()[1];
            for row in p.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
            for (u, v) in p.data().iter().zip(q.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
