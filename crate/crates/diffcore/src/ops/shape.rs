//! Data-movement primitives: reshape, permute, expand, concat, select.

use crate::error::{shape_err, DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::DTensor;

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Source offsets of a strided view, in row-major order of `shape`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Debug)]
struct ReshapeRule;

impl<T: Scalar> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Gather through a fixed offset table; backward scatters-adds.
#[derive(Debug)]
struct GatherRule {
    name: &'static str,
    offsets: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherRule {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); inputs[0].numel()];
        for (&src, &v) in self.offsets.iter().zip(grad) {
            g[src] += v;
        }
        vec![Some(g)]
    }
}

#[derive(Debug)]
struct ConcatRule {
    outer: usize,
    chunks: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let row: usize = self.chunks.iter().sum();
        let mut out: Vec<Vec<T>> = self.chunks.iter().map(|c| Vec::with_capacity(c * self.outer)).collect();
        for o in 0..self.outer {
            let mut start = o * row;
            for (buf, &c) in out.iter_mut().zip(&self.chunks) {
                buf.extend_from_slice(&grad[start..start + c]);
                start += c;
            }
        }
        out.into_iter().map(Some).collect()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return shape_err("reshape", src.shape(), shape);
        }
        let out = DTensor::new(shape, src.data().to_vec())?;
        Ok(self.push(out, vec![x], Box::new(ReshapeRule)))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, offsets: Vec<usize>, name: &'static str) -> Result<Var> {
        let src = self.data(x);
        let data = offsets.iter().map(|&o| src[o]).collect();
        let out = DTensor::new(&shape, data)?;
        Ok(self.push(out, vec![x], Box::new(GatherRule { name, offsets })))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(DiffError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let offsets = strided_offsets(&out_shape, &out_strides);
        self.gather(x, out_shape, offsets, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(DiffError::Invalid {
                op: "transpose",
                msg: format!("rank {rank} tensor has no matrix axes"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Repeats size-1 axes to `shape`. Missing leading axes are added.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() > shape.len() {
            return shape_err("expand", &src, shape);
        }
        let pad = shape.len() - src.len();
        let mut padded = vec![1; pad];
        padded.extend_from_slice(&src);
        let src_strides = contiguous_strides(&padded);
        let mut strides = Vec::with_capacity(shape.len());
        for d in 0..shape.len() {
            if padded[d] == shape[d] {
                strides.push(src_strides[d]);
            } else if padded[d] == 1 {
                strides.push(0);
            } else {
                return shape_err("expand", &src, shape);
            }
        }
        let offsets = strided_offsets(shape, &strides);
        self.gather(x, shape.to_vec(), offsets, "expand")
    }

    /// Takes entry `index` of axis 0, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(DiffError::Invalid {
                op: "select",
                msg: format!("index {index} out of range for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let offsets = (index * inner..(index + 1) * inner).collect();
        self.gather(x, shape[1..].to_vec(), offsets, "select")
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: "no operands".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.data(v)[o * c..(o + 1) * c]);
            }
        }
        let out = DTensor::new(&out_shape, data)?;
        Ok(self.push(out, inputs.to_vec(), Box::new(ConcatRule { outer, chunks })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(DTensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn expand_middle_axis_sums_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(DTensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = tape.expand(x, &[2, 3, 2]).unwrap();
        assert_eq!(tape.data(e), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn concat_last_axis_interleaves_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(DTensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(DTensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn select_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(DTensor::zeros(&[2, 3]));
        assert!(tape.select(a, 2).is_err());
        let r = tape.select(a, 1).unwrap();
        assert_eq!(tape.shape(r), &[3]);
    }
}
