//! Dense fp64 tensors and the reverse-mode tape built on top of them.
//!
//! `Tensor` is a plain value: a shape plus shared row-major storage. The
//! autodiff layer (`Tape`, `Var`) records operations on tensors and replays
//! them in reverse; evaluation-only code paths use the same kernels through
//! the value-level methods below without paying for a tape.

mod ops;
mod tape;

pub use ops::{stable_sigmoid, stable_softplus};
pub use tape::{Tape, Var};

use std::sync::Arc;

/// Row-major fp64 array. Rank 0 (scalar), 1, and 2 are what the model uses.
/// Clones share storage; mutation goes through `make_mut`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![x]) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, x: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![x; numel]) }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; copies only if the storage is currently shared.
    pub fn make_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    // ─── Value-level math (no tape) ───

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// self (m x k) times other (k x n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2);
        assert_eq!(other.rank(), 2);
        assert_eq!(self.cols(), other.rows(), "matmul {:?} x {:?}", self.shape, other.shape);
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(), false, other.data(), false, 0.0, &mut out);
        Tensor::matrix(m, n, out)
    }

    /// Scales column j of a rank-2 tensor by `scales[j]`.
    pub fn scale_cols(&self, scales: &Tensor) -> Tensor {
        assert_eq!(scales.numel(), self.cols());
        let c = self.cols();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scales.data[i % c])
            .collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        assert_eq!(bias.numel(), self.cols());
        let c = self.cols();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias.data[i % c])
            .collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Row-wise log-softmax for a rank-2 tensor.
    pub fn log_softmax_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = self.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        Tensor::matrix(r, c, out)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// C = alpha * A' * B' + beta * C where A' is A or its transpose (likewise B).
/// Stored dims are the physical (row, col) extents before any transpose.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    // Row-major strides; a transposed operand swaps its stride pair.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_naive() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // (A^T B) computed two ways.
        let a = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let direct = a.transpose().matmul(&b);
        let mut out = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, a.data(), true, b.data(), false, 0.0, &mut out);
        assert_eq!(direct.data(), &out[..]);
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let ls = x.log_softmax_rows();
        for i in 0..2 {
            let total: f64 = ls.row(i).iter().map(|&v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
