//! Canonical Gaussian parameters, their activations and deformation residuals.

use diffcore::{DTensor, Scalar, Tape, Var};

use crate::error::{contract, Error, Result};
use crate::math::{mat_mul, transpose, Mat3, Vec3};

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`.
pub fn quat_to_rotation<T: Scalar>(q: [T; 4]) -> Result<Mat3<T>> {
    let norm = q.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Numeric(format!("quaternion {q:?} has zero or non-finite norm")));
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    let one = T::one();
    let two = T::lit(2.0);
    Ok([
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ])
}

/// `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn assemble_covariance<T: Scalar>(q: [T; 4], log_scale: Vec3<T>) -> Result<Mat3<T>> {
    let r = quat_to_rotation(q)?;
    let s = log_scale.map(|v| v.exp());
    let mut rs = r;
    for row in rs.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= s[k];
        }
    }
    Ok(mat_mul(&rs, &transpose(&rs)))
}

/// One Gaussian with activated opacity and scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian<T> {
    pub mean: Vec3<T>,
    pub rotation: [T; 4],
    pub log_scale: Vec3<T>,
    pub opacity: T,
    pub color: Vec3<T>,
}

/// `o * exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))`.
///
/// The inverse is formed as `R S^-2 R^T`, which never inverts a matrix
/// numerically.
pub fn density_at<T: Scalar>(g: &Gaussian<T>, x: Vec3<T>) -> Result<T> {
    let r = quat_to_rotation(g.rotation)?;
    let d = [x[0] - g.mean[0], x[1] - g.mean[1], x[2] - g.mean[2]];
    // Coordinates of d in the Gaussian's principal frame.
    let mut mahalanobis = T::zero();
    for k in 0..3 {
        let along = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
        let inv_var = (T::lit(-2.0) * g.log_scale[k]).exp();
        mahalanobis += along * along * inv_var;
    }
    Ok(g.opacity * (T::lit(-0.5) * mahalanobis).exp())
}

/// N canonical Gaussians.
///
/// Rotations are unnormalized `[w, x, y, z]` quaternions, scales are stored
/// as logs, opacities as logits and colors as RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T: Scalar = f64> {
    pub positions: DTensor<T>,
    pub rotations: DTensor<T>,
    pub log_scales: DTensor<T>,
    pub opacity_logits: DTensor<T>,
    pub colors: DTensor<T>,
}

impl<T: Scalar> GaussianSet<T> {
    pub fn new(
        positions: DTensor<T>,
        rotations: DTensor<T>,
        log_scales: DTensor<T>,
        opacity_logits: DTensor<T>,
        colors: DTensor<T>,
    ) -> Result<Self> {
        let set = Self {
            positions,
            rotations,
            log_scales,
            opacity_logits,
            colors,
        };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set from per-Gaussian rows.
    pub fn from_gaussians(rows: &[Gaussian<T>]) -> Result<Self> {
        let n = rows.len();
        let logit = |o: T| (o / (T::one() - o)).ln();
        Self::new(
            DTensor::new(&[n, 3], rows.iter().flat_map(|g| g.mean).collect())?,
            DTensor::new(&[n, 4], rows.iter().flat_map(|g| g.rotation).collect())?,
            DTensor::new(&[n, 3], rows.iter().flat_map(|g| g.log_scale).collect())?,
            DTensor::new(&[n], rows.iter().map(|g| logit(g.opacity)).collect())?,
            DTensor::new(&[n, 3], rows.iter().flat_map(|g| g.color).collect())?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return contract("a Gaussian set needs at least one Gaussian");
        }
        let expect = [
            ("positions", self.positions.shape(), vec![n, 3]),
            ("rotations", self.rotations.shape(), vec![n, 4]),
            ("log_scales", self.log_scales.shape(), vec![n, 3]),
            ("opacity_logits", self.opacity_logits.shape(), vec![n]),
            ("colors", self.colors.shape(), vec![n, 3]),
        ];
        for (name, got, want) in expect {
            if got != want.as_slice() {
                return contract(format!("{name} has shape {got:?}, expected {want:?}"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, i: usize) -> Vec3<T> {
        row3(&self.positions, i)
    }

    pub fn rotation(&self, i: usize) -> [T; 4] {
        let d = self.rotations.data();
        [d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]]
    }

    pub fn log_scale(&self, i: usize) -> Vec3<T> {
        row3(&self.log_scales, i)
    }

    pub fn scale(&self, i: usize) -> Vec3<T> {
        self.log_scale(i).map(|v| v.exp())
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits.data()[i])
    }

    pub fn color(&self, i: usize) -> Vec3<T> {
        row3(&self.colors, i)
    }

    pub fn gaussian(&self, i: usize) -> Gaussian<T> {
        Gaussian {
            mean: self.position(i),
            rotation: self.rotation(i),
            log_scale: self.log_scale(i),
            opacity: self.opacity(i),
            color: self.color(i),
        }
    }

    /// Index of the first Gaussian holding a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let g = self.gaussian(i);
            let logit = self.opacity_logits.data()[i];
            !(g.mean.iter().chain(&g.rotation).chain(&g.log_scale).chain(&g.color).all(|v| v.is_finite()) && logit.is_finite())
        })
    }

    pub fn parameters(&self) -> [&DTensor<T>; 5] {
        [&self.positions, &self.rotations, &self.log_scales, &self.opacity_logits, &self.colors]
    }

    pub fn parameters_mut(&mut self) -> [&mut DTensor<T>; 5] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity_logits,
            &mut self.colors,
        ]
    }

    /// Records every field on `tape`, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundGaussians {
        let mut leaf = |t: &DTensor<T>| if trainable { tape.param(t.detached()) } else { tape.constant(t.detached()) };
        BoundGaussians {
            positions: leaf(&self.positions),
            rotations: leaf(&self.rotations),
            log_scales: leaf(&self.log_scales),
            opacity_logits: leaf(&self.opacity_logits),
            colors: leaf(&self.colors),
        }
    }

    /// Copy with colors replaced, used by the motion heatmap.
    pub fn with_colors(&self, colors: DTensor<T>) -> Result<Self> {
        Self::new(
            self.positions.clone(),
            self.rotations.clone(),
            self.log_scales.clone(),
            self.opacity_logits.clone(),
            colors,
        )
    }
}

fn row3<T: Scalar>(t: &DTensor<T>, i: usize) -> Vec3<T> {
    let d = t.data();
    [d[3 * i], d[3 * i + 1], d[3 * i + 2]]
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tape handles of a [`GaussianSet`]'s fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundGaussians {
    pub positions: Var,
    pub rotations: Var,
    pub log_scales: Var,
    pub opacity_logits: Var,
    pub colors: Var,
}

impl BoundGaussians {
    pub fn vars(&self) -> [Var; 5] {
        [self.positions, self.rotations, self.log_scales, self.opacity_logits, self.colors]
    }

    /// `mu + d_mu`, `normalize(r + d_r)`, `s + d_s`; opacity and color pass
    /// through. Residuals are `[N, 3]`, `[N, 4]` and `[N, 3]`.
    pub fn apply_residual<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        d_position: Var,
        d_rotation: Var,
        d_log_scale: Var,
    ) -> Result<BoundGaussians> {
        let positions = tape.add(self.positions, d_position)?;
        let rotated = tape.add(self.rotations, d_rotation)?;
        let rotations = tape.normalize(rotated, 1)?;
        let log_scales = tape.add(self.log_scales, d_log_scale)?;
        Ok(BoundGaussians {
            positions,
            rotations,
            log_scales,
            ..*self
        })
    }
}

/// Per-timestamp residuals `[B, N, 3]`, `[B, N, 4]`, `[B, N, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationResidual<T: Scalar = f64> {
    pub d_position: DTensor<T>,
    pub d_rotation: DTensor<T>,
    pub d_log_scale: DTensor<T>,
}

/// Position, rotation and scale residuals of one timestamp.
pub type ResidualParts<T> = (DTensor<T>, DTensor<T>, DTensor<T>);

impl<T: Scalar> DeformationResidual<T> {
    pub fn zeros(batch: usize, n: usize) -> Self {
        Self {
            d_position: DTensor::zeros(&[batch, n, 3]),
            d_rotation: DTensor::zeros(&[batch, n, 4]),
            d_log_scale: DTensor::zeros(&[batch, n, 3]),
        }
    }

    pub fn batch(&self) -> usize {
        self.d_position.shape()[0]
    }

    /// Stacks per-timestamp `[N, k]` residuals.
    pub fn stack(parts: &[ResidualParts<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return contract("cannot stack an empty residual list");
        };
        let n = first.0.shape()[0];
        let cat = |pick: &dyn Fn(&ResidualParts<T>) -> &DTensor<T>, width: usize| -> Result<DTensor<T>> {
            let mut data = Vec::with_capacity(parts.len() * n * width);
            for p in parts {
                let t = pick(p);
                if t.shape() != [n, width] {
                    return contract(format!("residual part has shape {:?}, expected [{n}, {width}]", t.shape()));
                }
                data.extend_from_slice(t.data());
            }
            Ok(DTensor::new(&[parts.len(), n, width], data)?)
        };
        Ok(Self {
            d_position: cat(&|p| &p.0, 3)?,
            d_rotation: cat(&|p| &p.1, 4)?,
            d_log_scale: cat(&|p| &p.2, 3)?,
        })
    }
}

/// Deformed parameters at batch entry `i`: `mu + d_mu_i`,
/// `normalize(r + d_r_i)`, `s + d_s_i`. Opacity and color are untouched.
pub fn apply_residual<T: Scalar>(g: &GaussianSet<T>, res: &DeformationResidual<T>, i: usize) -> Result<GaussianSet<T>> {
    let n = g.len();
    let b = res.batch();
    if i >= b {
        return contract(format!("batch index {i} out of range for {b} residuals"));
    }
    let shapes_ok = res.d_position.shape() == [b, n, 3] && res.d_rotation.shape() == [b, n, 4] && res.d_log_scale.shape() == [b, n, 3];
    if !shapes_ok {
        return contract(format!("residual shapes do not match {n} Gaussians"));
    }
    fn slice<T: Scalar>(t: &DTensor<T>, i: usize, n: usize, w: usize) -> &[T] {
        &t.data()[i * n * w..(i + 1) * n * w]
    }
    let add = |base: &DTensor<T>, delta: &[T]| -> Result<DTensor<T>> {
        Ok(DTensor::new(base.shape(), base.data().iter().zip(delta).map(|(&a, &d)| a + d).collect())?)
    };
    let positions = add(&g.positions, slice(&res.d_position, i, n, 3))?;
    let log_scales = add(&g.log_scales, slice(&res.d_log_scale, i, n, 3))?;
    let mut rotations = add(&g.rotations, slice(&res.d_rotation, i, n, 4))?;
    for (row, q) in rotations.data_mut().chunks_exact_mut(4).enumerate() {
        let norm = q.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Numeric(format!("rotation of Gaussian {row} has zero norm after its residual")));
        }
        q.iter_mut().for_each(|v| *v /= norm);
    }
    GaussianSet::new(positions, rotations, log_scales, g.opacity_logits.clone(), g.colors.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_mat(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_quaternion_is_identity() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let r = quat_to_rotation([h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        assert!(approx_mat(&r, &[[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 1e-15));
    }

    #[test]
    fn zero_quaternion_is_numeric_error() {
        assert!(matches!(quat_to_rotation([0.0f64; 4]), Err(Error::Numeric(_))));
    }

    #[test]
    fn axis_aligned_covariance() {
        let s = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let c = assemble_covariance([1.0, 0.0, 0.0, 0.0], s).unwrap();
        assert!(approx_mat(&c, &[[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]], 1e-14));
    }

    #[test]
    fn isotropic_covariance_ignores_rotation() {
        let c = assemble_covariance([0.3, -0.5, 0.7, 0.2], [0.0; 3]).unwrap();
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(approx_mat(&c, &eye, 1e-14));
    }

    fn unit(mean: Vec3<f64>, opacity: f64) -> Gaussian<f64> {
        Gaussian {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity,
            color: [1.0; 3],
        }
    }

    #[test]
    fn density_peaks_at_mean() {
        let g = unit([0.5, -1.0, 2.0], 0.7);
        assert_eq!(density_at(&g, g.mean).unwrap(), 0.7);
    }

    #[test]
    fn density_unit_covariance() {
        let g = unit([0.0; 3], 1.0);
        let v = density_at(&g, [1.0, 1.0, 0.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    fn small_set() -> GaussianSet<f64> {
        GaussianSet::from_gaussians(&[unit([0.0, 1.0, 2.0], 0.5), unit([3.0, 4.0, 5.0], 0.25)]).unwrap()
    }

    #[test]
    fn zero_residual_is_identity() {
        let g = small_set();
        let res = DeformationResidual::zeros(2, 2);
        let out = apply_residual(&g, &res, 1).unwrap();
        assert_eq!(out.positions.data(), g.positions.data());
        assert_eq!(out.log_scales.data(), g.log_scales.data());
        assert_eq!(out.rotations.data(), g.rotations.data());
    }

    #[test]
    fn translation_residual() {
        let g = small_set();
        let mut res = DeformationResidual::zeros(1, 2);
        res.d_position.data_mut()[0] = 1.0;
        let out = apply_residual(&g, &res, 0).unwrap();
        assert_eq!(out.position(0), [1.0, 1.0, 2.0]);
        assert_eq!(out.position(1), g.position(1));
        assert_eq!(out.colors, g.colors);
        assert_eq!(out.opacity_logits, g.opacity_logits);
    }

    #[test]
    fn residual_batch_index_checked() {
        let g = small_set();
        let res = DeformationResidual::zeros(2, 2);
        assert!(matches!(apply_residual(&g, &res, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn cancelling_rotation_residual_is_numeric_error() {
        let g = small_set();
        let mut res = DeformationResidual::zeros(1, 2);
        res.d_rotation.data_mut()[0] = -1.0;
        assert!(matches!(apply_residual(&g, &res, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn residual_gradient_equals_position_gradient() {
        let g = small_set();
        let mut tape = Tape::<f64>::new();
        let bound = g.bind(&mut tape, true);
        let dmu = tape.param(DTensor::zeros(&[2, 3]));
        let drot = tape.constant(DTensor::zeros(&[2, 4]));
        let ds = tape.constant(DTensor::zeros(&[2, 3]));
        let moved = bound.apply_residual(&mut tape, dmu, drot, ds).unwrap();
        let w = tape.constant(DTensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let p = tape.tanh(moved.positions);
        let l = tape.mul(p, w).unwrap();
        let loss = tape.sum(l);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(dmu).unwrap(), tape.grad(bound.positions).unwrap());
    }

    #[test]
    fn empty_set_rejected() {
        let e = GaussianSet::<f64>::new(
            DTensor::zeros(&[0, 3]),
            DTensor::zeros(&[0, 4]),
            DTensor::zeros(&[0, 3]),
            DTensor::zeros(&[0]),
            DTensor::zeros(&[0, 3]),
        );
        assert!(e.is_err());
    }
}
