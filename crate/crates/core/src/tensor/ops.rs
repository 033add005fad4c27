//! Differentiable operations.
//!
//! Elementwise binaries broadcast a scalar against any shape; everything else
//! demands exact shapes and panics on mismatch (misuse is a programming
//! error, not a runtime condition). Backward closures skip parents that are
//! not tracked, so constant operands cost nothing in the reverse sweep.

use super::tape::{accumulate, grad_slot, GradBuf};
use super::{gemm, Tensor, Var};
use crate::special;

fn pick(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

impl Var {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let x = self.value();
        let y = x.map(&f);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let (xi, yv, idx, n) = (x, y.clone(), self.idx, y.numel());
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, n, |slot| {
                    for i in 0..n {
                        slot[i] += g[i] * df(xi.data()[i], yv.data()[i]);
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    fn binary(
        &self,
        other: &Var,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        assert!(self.same_tape(other), "operands on different tapes");
        let a = self.value();
        let b = other.value();
        let shape: Vec<usize> = if a.is_scalar() && !b.is_scalar() {
            b.shape().to_vec()
        } else if b.is_scalar() && !a.is_scalar() {
            a.shape().to_vec()
        } else {
            assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
            a.shape().to_vec()
        };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f(pick(&a, i), pick(&b, i))).collect();
        let y = Tensor::new(shape, data);

        let (ta, tb) = (self.tracked(), other.tracked());
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if ta || tb {
            let (ai, bi) = (a, b);
            let (ia, ib) = (self.idx, other.idx);
            Some(Box::new(move |g, grads| {
                if ta {
                    let na = ai.numel();
                    accumulate(grads, ia, na, |slot| {
                        for i in 0..n {
                            let d = g[i] * dfa(pick(&ai, i), pick(&bi, i));
                            slot[if na == 1 { 0 } else { i }] += d;
                        }
                    });
                }
                if tb {
                    let nb = bi.numel();
                    accumulate(grads, ib, nb, |slot| {
                        for i in 0..n {
                            let d = g[i] * dfb(pick(&ai, i), pick(&bi, i));
                            slot[if nb == 1 { 0 } else { i }] += d;
                        }
                    });
                }
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    // ─── Elementwise ───

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// c - x.
    pub fn rsub_scalar(&self, c: f64) -> Var {
        self.unary(move |x| c - x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn log(&self) -> Var {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Var {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn softplus(&self) -> Var {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    /// Clamp with straight-through gradient strictly inside the band.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn ln_gamma(&self) -> Var {
        self.unary(special::ln_gamma, |x, _| special::digamma(x))
    }

    pub fn digamma(&self) -> Var {
        self.unary(special::digamma, |x, _| special::trigamma(x))
    }

    // ─── Linear algebra ───

    /// self (m x k) times other (k x n).
    pub fn matmul(&self, other: &Var) -> Var {
        assert!(self.same_tape(other), "operands on different tapes");
        let a = self.value();
        let b = other.value();
        let y = a.matmul(&b);
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let (ta, tb) = (self.tracked(), other.tracked());
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if ta || tb {
            let (ia, ib) = (self.idx, other.idx);
            Some(Box::new(move |g, grads| {
                if ta {
                    // dA += G B^T
                    let slot = grad_slot(grads, ia, m * k);
                    gemm(m, n, k, 1.0, g, false, b.data(), true, 1.0, slot);
                }
                if tb {
                    // dB += A^T G
                    let slot = grad_slot(grads, ib, k * n);
                    gemm(k, m, n, 1.0, a.data(), true, g, false, 1.0, slot);
                }
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    // ─── Shape ───

    /// Tile a length-m vector into `rows` identical rows.
    pub fn broadcast_row(&self, rows: usize) -> Var {
        let v = self.value();
        assert_eq!(v.rank(), 1, "broadcast_row wants a vector");
        let m = v.numel();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let y = Tensor::matrix(rows, m, data);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let idx = self.idx;
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, m, |slot| {
                    for r in 0..rows {
                        for j in 0..m {
                            slot[j] += g[r * m + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    /// Tile a length-r vector into `cols` identical columns.
    pub fn broadcast_col(&self, cols: usize) -> Var {
        let v = self.value();
        assert_eq!(v.rank(), 1, "broadcast_col wants a vector");
        let r = v.numel();
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for _ in 0..cols {
                data.push(v.data()[i]);
            }
        }
        let y = Tensor::matrix(r, cols, data);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let idx = self.idx;
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, r, |slot| {
                    for i in 0..r {
                        for j in 0..cols {
                            slot[i] += g[i * cols + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    // ─── Reductions ───

    pub fn sum(&self) -> Var {
        let x = self.value();
        let n = x.numel();
        let y = Tensor::scalar(x.data().iter().sum());
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let idx = self.idx;
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, n, |slot| {
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row-wise log-sum-exp of a rank-2 tensor, max-subtracted for stability.
    pub fn logsumexp_rows(&self) -> Var {
        let x = self.value();
        assert_eq!(x.rank(), 2, "logsumexp_rows wants rank 2");
        let (r, c) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push(m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln());
        }
        let y = Tensor::vector(out);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let (xi, yv, idx) = (x, y.clone(), self.idx);
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, r * c, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] +=
                                g[i] * (xi.data()[i * c + j] - yv.data()[i]).exp();
                        }
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    /// Inclusive prefix sums of a vector.
    pub fn cumsum(&self) -> Var {
        let x = self.value();
        assert_eq!(x.rank(), 1, "cumsum wants a vector");
        let n = x.numel();
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &v in x.data() {
            acc += v;
            out.push(acc);
        }
        let y = Tensor::vector(out);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let idx = self.idx;
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, n, |slot| {
                    let mut suffix = 0.0;
                    for i in (0..n).rev() {
                        suffix += g[i];
                        slot[i] += suffix;
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }

    /// out[r] = self[r, index[r]] for a rank-2 tensor.
    pub fn take_per_row(&self, index: &[usize]) -> Var {
        let x = self.value();
        assert_eq!(x.rank(), 2, "take_per_row wants rank 2");
        let (r, c) = (x.rows(), x.cols());
        assert_eq!(index.len(), r, "one index per row");
        let data: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "class index {j} out of range {c}");
                x.data()[i * c + j]
            })
            .collect();
        let y = Tensor::vector(data);
        let backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>> = if self.tracked() {
            let (idx, index) = (self.idx, index.to_vec());
            Some(Box::new(move |g, grads| {
                accumulate(grads, idx, r * c, |slot| {
                    for (i, &j) in index.iter().enumerate() {
                        slot[i * c + j] += g[i];
                    }
                });
            }))
        } else {
            None
        };
        self.push(y, backward)
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn root_gradient_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let loss = x.mul(&x).sum();
        tape.backward(&loss);
        assert!(loss.grad().is_none()); // not a leaf
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0]));
        let w = tape.leaf(Tensor::vector(vec![2.0]), true);
        let loss = x.mul(&w).sum();
        tape.backward(&loss);
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[3.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(&x).add(&x.scale(5.0)); // x^2 + 5x
        tape.backward(&y.sum());
        assert_eq!(x.grad().unwrap().item(), 2.0 * 3.0 + 5.0);
    }

    #[test]
    fn scalar_broadcast_in_binaries() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let y = v.mul(&s).sum(); // 2*(1+2+3)
        tape.backward(&y);
        assert_eq!(y.item(), 12.0);
        assert_eq!(s.grad().unwrap().item(), 6.0);
        assert_eq!(v.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cumsum_forward_and_adjoint() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let y = x.cumsum();
        assert_eq!(y.value().data(), &[1.0, 3.0, 6.0]);
        // d/dx sum(cumsum(x)) = [3, 2, 1]
        tape.backward(&y.sum());
        assert_eq!(x.grad().unwrap().data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn logsumexp_matches_value_level() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5]));
        let y = x.logsumexp_rows().value();
        let direct: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((y.data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn take_per_row_picks_and_scatters() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let y = x.take_per_row(&[2, 0]);
        assert_eq!(y.value().data(), &[3.0, 4.0]);
        tape.backward(&y.sum());
        assert_eq!(
            x.grad().unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }
}
