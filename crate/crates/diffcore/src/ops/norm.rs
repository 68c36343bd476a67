//! Softmax, layer normalization and unit-length normalization along an axis.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::DTensor;

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(DiffError::Invalid {
            op,
            msg: format!("axis {axis} out of range for {shape:?}"),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Visits every 1-D lane along the split axis as a list of flat indices.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = (o * len + j) * inner + i;
            }
            f(&lane);
        }
    }
}

#[derive(Debug)]
struct SoftmaxRule {
    dims: (usize, usize, usize),
}

impl<T: Scalar> Backward<T> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[&DTensor<T>], output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let y = output.data();
        let mut g = vec![T::zero(); y.len()];
        let (outer, len, inner) = self.dims;
        for_each_lane(outer, len, inner, |lane| {
            let dot: T = lane.iter().map(|&i| grad[i] * y[i]).sum();
            for &i in lane {
                g[i] = y[i] * (grad[i] - dot);
            }
        });
        vec![Some(g)]
    }
}

#[derive(Debug)]
struct LayerNormRule<T> {
    dims: (usize, usize, usize),
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormRule<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let gain = inputs[1].data();
        let (outer, len, inner) = self.dims;
        let n = T::lit(len as f64);
        let xhat = &self.normalized;
        let mut gx = vec![T::zero(); grad.len()];
        let mut ggain = vec![T::zero(); len];
        let mut gbias = vec![T::zero(); len];
        let mut lane_id = 0;
        for_each_lane(outer, len, inner, |lane| {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for (j, &i) in lane.iter().enumerate() {
                let d = grad[i] * gain[j];
                mean_d += d;
                mean_dx += d * xhat[i];
                ggain[j] += grad[i] * xhat[i];
                gbias[j] += grad[i];
            }
            mean_d /= n;
            mean_dx /= n;
            let rstd = self.inv_std[lane_id];
            for (j, &i) in lane.iter().enumerate() {
                let d = grad[i] * gain[j];
                gx[i] = rstd * (d - mean_d - xhat[i] * mean_dx);
            }
            lane_id += 1;
        });
        vec![Some(gx), Some(ggain), Some(gbias)]
    }
}

#[derive(Debug)]
struct NormalizeRule<T> {
    dims: (usize, usize, usize),
    norms: Vec<T>,
}

impl<T: Scalar> Backward<T> for NormalizeRule<T> {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn backward(&self, _inputs: &[&DTensor<T>], output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let y = output.data();
        let mut g = vec![T::zero(); y.len()];
        let (outer, len, inner) = self.dims;
        let mut lane_id = 0;
        for_each_lane(outer, len, inner, |lane| {
            let dot: T = lane.iter().map(|&i| grad[i] * y[i]).sum();
            let norm = self.norms[lane_id];
            for &i in lane {
                g[i] = (grad[i] - y[i] * dot) / norm;
            }
            lane_id += 1;
        });
        vec![Some(g)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let dims = split_axis("softmax", src.shape(), axis)?;
        let xd = src.data();
        let mut y = vec![T::zero(); xd.len()];
        for_each_lane(dims.0, dims.1, dims.2, |lane| {
            let max = lane.iter().map(|&i| xd[i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &i in lane {
                y[i] = (xd[i] - max).exp();
                total += y[i];
            }
            for &i in lane {
                y[i] /= total;
            }
        });
        let out = DTensor::new(src.shape(), y)?;
        Ok(self.push(out, vec![x], Box::new(SoftmaxRule { dims })))
    }

    /// Normalizes each lane along `axis` to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias` indexed along that axis.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let dims = split_axis("layer_norm", src.shape(), axis)?;
        let len = dims.1;
        if self.value(gain).numel() != len || self.value(bias).numel() != len {
            return Err(DiffError::Shape {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![len],
            });
        }
        let (xd, g, b) = (src.data(), self.data(gain), self.data(bias));
        let n = T::lit(len as f64);
        let mut normalized = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(dims.0 * dims.2);
        for_each_lane(dims.0, dims.1, dims.2, |lane| {
            let mean = lane.iter().map(|&i| xd[i]).sum::<T>() / n;
            let var = lane.iter().map(|&i| (xd[i] - mean) * (xd[i] - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, &i) in lane.iter().enumerate() {
                normalized[i] = (xd[i] - mean) * rstd;
                y[i] = normalized[i] * g[j] + b[j];
            }
            inv_std.push(rstd);
        });
        let out = DTensor::new(src.shape(), y)?;
        let rule = LayerNormRule { dims, normalized, inv_std };
        Ok(self.push(out, vec![x, gain, bias], Box::new(rule)))
    }

    /// Scales each lane along `axis` to unit Euclidean length.
    pub fn normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let dims = split_axis("normalize", src.shape(), axis)?;
        let xd = src.data();
        let mut y = vec![T::zero(); xd.len()];
        let mut norms = Vec::with_capacity(dims.0 * dims.2);
        let mut failed = None;
        for_each_lane(dims.0, dims.1, dims.2, |lane| {
            let norm = lane.iter().map(|&i| xd[i] * xd[i]).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                failed.get_or_insert(norms.len());
            }
            for &i in lane {
                y[i] = xd[i] / norm;
            }
            norms.push(norm);
        });
        if let Some(lane) = failed {
            return Err(DiffError::Numeric {
                op: "normalize",
                msg: format!("lane {lane} has zero or non-finite norm"),
            });
        }
        let out = DTensor::new(src.shape(), y)?;
        Ok(self.push(out, vec![x], Box::new(NormalizeRule { dims, norms })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(DTensor::from_vec(v.to_vec()))
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = vector(&mut tape, &[1.0, 1.0, 1.0]);
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_softmax() {
        let mut tape = Tape::new();
        let x = vector(&mut tape, &[0.0, 1e6]);
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.data(y)[0].abs() < 1e-12);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = vector(&mut tape, &[2.5, 2.5, 2.5, 2.5]);
        let g = vector(&mut tape, &[1.0; 4]);
        let b = vector(&mut tape, &[0.0; 4]);
        let y = tape.layer_norm(x, 0, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let mut tape = Tape::new();
        let x = vector(&mut tape, &[1.0, 3.0]);
        let g = vector(&mut tape, &[1.0; 2]);
        let b = vector(&mut tape, &[0.0; 2]);
        let eps = 1e-5;
        let y = tape.layer_norm(x, 0, g, b, eps).unwrap();
        let expected = 1.0 / (1.0f64 + eps).sqrt();
        assert!((tape.data(y)[0] + expected).abs() < 1e-15);
        assert!((tape.data(y)[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_gain_length_checked() {
        let mut tape = Tape::new();
        let x = vector(&mut tape, &[1.0, 3.0]);
        let g = vector(&mut tape, &[1.0; 3]);
        let b = vector(&mut tape, &[0.0; 2]);
        assert!(tape.layer_norm(x, 0, g, b, 1e-5).is_err());
    }

    #[test]
    fn normalize_rejects_zero_lane() {
        let mut tape = Tape::new();
        let x = tape.constant(DTensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        assert!(matches!(tape.normalize(x, 1), Err(DiffError::Numeric { .. })));
    }
}
