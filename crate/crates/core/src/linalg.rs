//! Dense Cholesky factorization for the Gaussian task-inference scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower-triangular factor L with A = L L^T, plus log det A.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Vec<f64>,
    n: usize,
    log_det: f64,
}

impl Cholesky {
    /// Factor a symmetric positive-definite matrix. Fails with a numeric
    /// error if a pivot is not strictly positive.
    pub fn new(a: &Tensor) -> Result<Cholesky> {
        let n = a.rows();
        assert_eq!(a.cols(), n, "cholesky wants a square matrix");
        let src = a.data();
        let mut l = vec![0.0; n * n];
        let mut log_det = 0.0;
        for j in 0..n {
            let mut d = src[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "cholesky pivot {j} is {d}; matrix not positive definite"
                )));
            }
            let diag = d.sqrt();
            l[j * n + j] = diag;
            log_det += 2.0 * diag.ln();
            for i in j + 1..n {
                let mut s = src[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / diag;
            }
        }
        Ok(Cholesky { l, n, log_det })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solve L z = rhs by forward substitution.
    pub fn solve_lower(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut s = rhs[i];
            let row = &self.l[i * n..i * n + i];
            for (k, &lik) in row.iter().enumerate() {
                s -= lik * z[k];
            }
            z[i] = s / self.l[i * n + i];
        }
        z
    }

    /// x^T A^{-1} x via one triangular solve.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.solve_lower(x).iter().map(|z| z * z).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, &[99]);
        let b = crate::rng::normals(&mut rng, n * n, 1.0);
        let bt = Tensor::matrix(n, n, b);
        let mut a = bt.transpose().matmul(&bt);
        {
            let d = a.make_mut();
            for i in 0..n {
                d[i * n + i] += n as f64;
            }
        }
        a
    }

    #[test]
    fn reconstructs_the_matrix() {
        let a = spd(17, 3);
        let ch = Cholesky::new(&a).unwrap();
        let n = 17;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += ch.l[i * n + k] * ch.l[j * n + k];
                }
                assert!((s - a.at(i, j)).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn quad_form_on_identity_is_norm_squared() {
        let n = 8;
        let mut eye = Tensor::zeros(vec![n, n]);
        {
            let d = eye.make_mut();
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
        }
        let ch = Cholesky::new(&eye).unwrap();
        assert!(ch.log_det().abs() < 1e-14);
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let direct: f64 = x.iter().map(|v| v * v).sum();
        assert!((ch.quad_form(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn log_det_matches_scaling() {
        // det(c I_n) = c^n
        let n = 5;
        let c = 2.5f64;
        let mut m = Tensor::zeros(vec![n, n]);
        {
            let d = m.make_mut();
            for i in 0..n {
                d[i * n + i] = c;
            }
        }
        let ch = Cholesky::new(&m).unwrap();
        assert!((ch.log_det() - n as f64 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(Cholesky::new(&m).is_err());
    }
}
