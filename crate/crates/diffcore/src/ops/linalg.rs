use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::DTensor;

/// How the leading batch dimensions of a matmul pair up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Batching {
    /// Identical batch dimensions, one product per batch entry.
    Paired(usize),
    /// `b` is a plain matrix shared by every batch entry of `a`.
    SharedRhs(usize),
    /// `a` is a plain matrix shared by every batch entry of `b`.
    SharedLhs(usize),
}

#[derive(Debug)]
struct MatmulRule {
    m: usize,
    k: usize,
    n: usize,
    batching: Batching,
}

fn row_major<T>(data: &[T], cols: usize) -> (&[T], isize, isize) {
    (data, cols as isize, 1)
}

fn transposed<T>(data: &[T], cols: usize) -> (&[T], isize, isize) {
    (data, 1, cols as isize)
}

impl<T: Scalar> Backward<T> for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        match self.batching {
            Batching::SharedRhs(batch) => {
                let rows = batch * m;
                // ga = g . b^T, gb = a^T . g, with the batch folded into rows.
                T::gemm(rows, n, k, T::one(), row_major(grad, n), transposed(b, n), T::zero(), (&mut ga, k as isize, 1));
                T::gemm(k, rows, n, T::one(), transposed(a, k), row_major(grad, n), T::zero(), (&mut gb, n as isize, 1));
            }
            Batching::Paired(batch) => {
                for i in 0..batch {
                    let (ao, bo, go) = (i * m * k, i * k * n, i * m * n);
                    let g = &grad[go..go + m * n];
                    T::gemm(m, n, k, T::one(), row_major(g, n), transposed(&b[bo..bo + k * n], n), T::zero(), (&mut ga[ao..ao + m * k], k as isize, 1));
                    T::gemm(k, m, n, T::one(), transposed(&a[ao..ao + m * k], k), row_major(g, n), T::zero(), (&mut gb[bo..bo + k * n], n as isize, 1));
                }
            }
            Batching::SharedLhs(batch) => {
                for i in 0..batch {
                    let (bo, go) = (i * k * n, i * m * n);
                    let g = &grad[go..go + m * n];
                    T::gemm(m, n, k, T::one(), row_major(g, n), transposed(&b[bo..bo + k * n], n), T::one(), (&mut ga, k as isize, 1));
                    T::gemm(k, m, n, T::one(), transposed(a, k), row_major(g, n), T::zero(), (&mut gb[bo..bo + k * n], n as isize, 1));
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Matrix product over the last two axes.
    ///
    /// Leading batch dimensions must match exactly, or one operand must be a
    /// plain rank-2 matrix that is applied to every batch entry of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batching, lead) = if ba == bb {
            (Batching::Paired(ba.iter().product()), ba.to_vec())
        } else if bb.is_empty() {
            (Batching::SharedRhs(ba.iter().product()), ba.to_vec())
        } else if ba.is_empty() {
            (Batching::SharedLhs(bb.iter().product()), bb.to_vec())
        } else {
            return shape_err("matmul", &sa, &sb);
        };
        let mut shape = lead;
        shape.extend([m, n]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); shape.iter().product()];
        match batching {
            Batching::SharedRhs(batch) => {
                T::gemm(batch * m, k, n, T::one(), row_major(da, k), row_major(db, n), T::zero(), (&mut out, n as isize, 1));
            }
            Batching::Paired(batch) => {
                for i in 0..batch {
                    let (ao, bo, oo) = (i * m * k, i * k * n, i * m * n);
                    T::gemm(m, k, n, T::one(), row_major(&da[ao..ao + m * k], k), row_major(&db[bo..bo + k * n], n), T::zero(), (&mut out[oo..oo + m * n], n as isize, 1));
                }
            }
            Batching::SharedLhs(batch) => {
                for i in 0..batch {
                    let (bo, oo) = (i * k * n, i * m * n);
                    T::gemm(m, k, n, T::one(), row_major(da, k), row_major(&db[bo..bo + k * n], n), T::zero(), (&mut out[oo..oo + m * n], n as isize, 1));
                }
            }
        }
        let out = DTensor::new(&shape, out)?;
        Ok(self.push(out, vec![a, b], Box::new(MatmulRule { m, k, n, batching })))
    }
}
