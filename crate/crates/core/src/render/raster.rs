//! Projection, per-pixel alpha compositing and its reverse sweep.

use diffcore::Scalar;

use super::{Camera, RenderConfig};
use crate::error::{Error, Result};
use crate::gaussian::{quat_to_rotation, sigmoid};
use crate::math::{cast_mat, mat_mul, transpose, Mat3, Vec3};

/// A Gaussian after local-affine projection into the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2DGaussian<T> {
    /// Row of the Gaussian in its set.
    pub index: usize,
    pub mean2d: [T; 2],
    pub cov2d: [[T; 2]; 2],
    /// Inverse of `cov2d` as `(q00, q01, q11)`.
    pub conic: [T; 3],
    pub depth: T,
    pub color: Vec3<T>,
    pub opacity: T,
}

/// Intermediates of one projection kept for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Saved<T> {
    cam_point: Vec3<T>,
    rotation: Mat3<T>,
    quat_unit: [T; 4],
    quat_norm: T,
    variance: Vec3<T>,
    cov3d: Mat3<T>,
    jw: [[T; 3]; 2],
}

/// Raw parameter slices in set layout.
#[derive(Clone, Copy)]
pub(crate) struct Params<'a, T> {
    pub positions: &'a [T],
    pub rotations: &'a [T],
    pub log_scales: &'a [T],
    pub opacity_logits: &'a [T],
    pub colors: &'a [T],
}

impl<T: Scalar> Params<'_, T> {
    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    fn check_finite(&self) -> Result<()> {
        for i in 0..self.len() {
            let fields = [
                &self.positions[3 * i..3 * i + 3],
                &self.rotations[4 * i..4 * i + 4],
                &self.log_scales[3 * i..3 * i + 3],
                &self.opacity_logits[i..i + 1],
                &self.colors[3 * i..3 * i + 3],
            ];
            if fields.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("Gaussian {i} has a non-finite parameter")));
            }
        }
        Ok(())
    }
}

/// Projected Gaussians sorted front to back with their saved intermediates.
pub(crate) struct Prepared<T> {
    pub splats: Vec<Projected2DGaussian<T>>,
    saved: Vec<Saved<T>>,
}

#[allow(clippy::too_many_arguments)]
fn project_one<T: Scalar>(
    index: usize,
    mean: Vec3<T>,
    quat: [T; 4],
    log_scale: Vec3<T>,
    opacity: T,
    color: Vec3<T>,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Option<(Projected2DGaussian<T>, Saved<T>)>> {
    let w: Mat3<T> = cast_mat(&cam.rotation);
    let p: Vec3<T> = std::array::from_fn(|i| w[i][0] * mean[0] + w[i][1] * mean[1] + w[i][2] * mean[2] + T::lit(cam.translation[i]));
    if !(p[2] > T::lit(cam.near)) {
        return Ok(None);
    }
    let (fx, fy) = (T::lit(cam.fx), T::lit(cam.fy));
    let iz = T::one() / p[2];
    let mean2d = [fx * p[0] * iz + T::lit(cam.cx), fy * p[1] * iz + T::lit(cam.cy)];
    let j = [[fx * iz, T::zero(), -fx * p[0] * iz * iz], [T::zero(), fy * iz, -fy * p[1] * iz * iz]];
    let jw: [[T; 3]; 2] = std::array::from_fn(|a| std::array::from_fn(|c| j[a][0] * w[0][c] + j[a][1] * w[1][c] + j[a][2] * w[2][c]));

    let quat_norm = quat.iter().map(|&v| v * v).sum::<T>().sqrt();
    let quat_unit = quat.map(|v| v / quat_norm);
    let rotation = quat_to_rotation(quat_unit)?;
    let variance = log_scale.map(|v| (v + v).exp());
    let mut rd = rotation;
    for row in rd.iter_mut() {
        for k in 0..3 {
            row[k] *= variance[k];
        }
    }
    let cov3d = mat_mul(&rd, &transpose(&rotation));

    let dil = T::lit(cfg.dilation);
    let mut cov2d = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = T::zero();
            for c in 0..3 {
                for d in 0..3 {
                    acc += jw[a][c] * cov3d[c][d] * jw[b][d];
                }
            }
            cov2d[a][b] = acc;
        }
    }
    // Symmetrize against rounding so the conic is exactly symmetric.
    let off = (cov2d[0][1] + cov2d[1][0]) * T::lit(0.5);
    cov2d[0][1] = off;
    cov2d[1][0] = off;
    cov2d[0][0] += dil;
    cov2d[1][1] += dil;
    let det = cov2d[0][0] * cov2d[1][1] - off * off;
    debug_assert!(det > T::zero(), "projected covariance of Gaussian {index} is singular");
    if !(det > T::zero()) {
        return Err(Error::Numeric(format!("projected covariance of Gaussian {index} is singular")));
    }
    let conic = [cov2d[1][1] / det, -off / det, cov2d[0][0] / det];
    Ok(Some((
        Projected2DGaussian {
            index,
            mean2d,
            cov2d,
            conic,
            depth: p[2],
            color,
            opacity,
        },
        Saved {
            cam_point: p,
            rotation,
            quat_unit,
            quat_norm,
            variance,
            cov3d,
            jw,
        },
    )))
}

/// Projects a single activated Gaussian; `None` when culled by the near plane.
pub fn project<T: Scalar>(g: &crate::gaussian::Gaussian<T>, cam: &Camera, cfg: &RenderConfig) -> Result<Option<Projected2DGaussian<T>>> {
    Ok(project_one(0, g.mean, g.rotation, g.log_scale, g.opacity, g.color, cam, cfg)?.map(|(p, _)| p))
}

pub(crate) fn prepare<T: Scalar>(params: &Params<'_, T>, cam: &Camera, cfg: &RenderConfig) -> Result<Prepared<T>> {
    params.check_finite()?;
    let mut both = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let t3 = |s: &[T]| -> Vec3<T> { [s[3 * i], s[3 * i + 1], s[3 * i + 2]] };
        let r = params.rotations;
        let quat = [r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]];
        let projected = project_one(
            i,
            t3(params.positions),
            quat,
            t3(params.log_scales),
            sigmoid(params.opacity_logits[i]),
            t3(params.colors),
            cam,
            cfg,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("Gaussian {i}: {msg}")),
            other => other,
        })?;
        both.extend(projected);
    }
    // Stable sort keeps set order among equal depths.
    both.sort_by(|a, b| a.0.depth.partial_cmp(&b.0.depth).expect("depths are finite"));
    let (splats, saved) = both.into_iter().unzip();
    Ok(Prepared { splats, saved })
}

/// One nonzero term of a pixel's blend.
#[derive(Clone, Copy, Debug)]
struct Contribution<T> {
    slot: usize,
    alpha: T,
    transmittance: T,
    clamped: bool,
    offset: [T; 2],
}

fn blend<T: Scalar>(
    pixel: [T; 2],
    splats: &[Projected2DGaussian<T>],
    cfg: &RenderConfig,
    mut trace: Option<&mut Vec<Contribution<T>>>,
) -> (Vec3<T>, T) {
    let alpha_min = T::lit(cfg.alpha_min);
    let t_min = T::lit(cfg.transmittance_min);
    let alpha_max = cfg.alpha_max.map(T::lit);
    let half = T::lit(0.5);
    let mut color = [T::zero(); 3];
    let mut transmittance = T::one();
    for (slot, s) in splats.iter().enumerate() {
        let d = [pixel[0] - s.mean2d[0], pixel[1] - s.mean2d[1]];
        let q = s.conic;
        let power = -half * (q[0] * d[0] * d[0] + (q[1] + q[1]) * d[0] * d[1] + q[2] * d[1] * d[1]);
        let mut alpha = s.opacity * power.exp();
        let mut clamped = false;
        if let Some(m) = alpha_max {
            if alpha > m {
                alpha = m;
                clamped = true;
            }
        }
        if alpha < alpha_min || alpha == T::zero() {
            continue;
        }
        for (c, &sc) in color.iter_mut().zip(&s.color) {
            *c += sc * alpha * transmittance;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(Contribution {
                slot,
                alpha,
                transmittance,
                clamped,
                offset: d,
            });
        }
        transmittance *= T::one() - alpha;
        if transmittance < t_min {
            break;
        }
    }
    for (c, &b) in color.iter_mut().zip(&cfg.background) {
        *c += T::lit(b) * transmittance;
    }
    (color, transmittance)
}

/// Front-to-back blend of depth-sorted splats at one pixel; returns the
/// color and the remaining transmittance.
pub fn composite_pixel<T: Scalar>(pixel: [T; 2], sorted: &[Projected2DGaussian<T>], cfg: &RenderConfig) -> (Vec3<T>, T) {
    blend(pixel, sorted, cfg, None)
}

/// Row-major `H x W x 3` colors and `H x W` transmittance.
pub(crate) fn rasterize<T: Scalar>(prepared: &Prepared<T>, cam: &Camera, cfg: &RenderConfig) -> (Vec<T>, Vec<T>) {
    let (w, h) = (cam.width, cam.height);
    let mut colors = Vec::with_capacity(w * h * 3);
    let mut trans = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (c, t) = blend([T::lit(x as f64), T::lit(y as f64)], &prepared.splats, cfg, None);
            colors.extend(c);
            trans.push(t);
        }
    }
    (colors, trans)
}

/// Gradients of a scalar loss with respect to the raw parameters, given
/// `grad_image = dL/d(colors)`.
pub(crate) struct ParamGrads<T> {
    pub positions: Vec<T>,
    pub rotations: Vec<T>,
    pub log_scales: Vec<T>,
    pub opacity_logits: Vec<T>,
    pub colors: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(prepared: &Prepared<T>, n: usize, cam: &Camera, cfg: &RenderConfig, grad_image: &[T]) -> ParamGrads<T> {
    let m = prepared.splats.len();
    let zero = T::zero();
    let half = T::lit(0.5);
    // Per-splat accumulators in screen space.
    let mut d_mean = vec![[zero; 2]; m];
    let mut d_conic = vec![[zero; 3]; m];
    let mut d_opacity = vec![zero; m];
    let mut d_color = vec![[zero; 3]; m];

    let mut trace = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let base = 3 * (y * cam.width + x);
            let g = [grad_image[base], grad_image[base + 1], grad_image[base + 2]];
            if g.iter().all(|v| *v == zero) {
                continue;
            }
            trace.clear();
            let (_, t_final) = blend([T::lit(x as f64), T::lit(y as f64)], &prepared.splats, cfg, Some(&mut trace));
            // Color seen behind the current splat, projected on g.
            let mut behind = t_final * cfg.background.iter().zip(&g).map(|(&b, &gv)| T::lit(b) * gv).sum::<T>();
            for c in trace.iter().rev() {
                let s = &prepared.splats[c.slot];
                let cg = s.color[0] * g[0] + s.color[1] * g[1] + s.color[2] * g[2];
                let w = c.alpha * c.transmittance;
                for k in 0..3 {
                    d_color[c.slot][k] += w * g[k];
                }
                let keep = T::one() - c.alpha;
                let d_alpha = c.transmittance * cg - if keep > zero { behind / keep } else { zero };
                behind += cg * w;
                if c.clamped {
                    continue;
                }
                let gauss = c.alpha / s.opacity;
                d_opacity[c.slot] += d_alpha * gauss;
                let d_power = d_alpha * c.alpha;
                let [dx, dy] = c.offset;
                let q = s.conic;
                d_mean[c.slot][0] += d_power * (q[0] * dx + q[1] * dy);
                d_mean[c.slot][1] += d_power * (q[1] * dx + q[2] * dy);
                d_conic[c.slot][0] += -half * d_power * dx * dx;
                d_conic[c.slot][1] += -half * d_power * dx * dy;
                d_conic[c.slot][2] += -half * d_power * dy * dy;
            }
        }
    }

    let mut out = ParamGrads {
        positions: vec![zero; 3 * n],
        rotations: vec![zero; 4 * n],
        log_scales: vec![zero; 3 * n],
        opacity_logits: vec![zero; n],
        colors: vec![zero; 3 * n],
    };
    let w: Mat3<T> = cast_mat(&cam.rotation);
    let (fx, fy) = (T::lit(cam.fx), T::lit(cam.fy));
    let two = T::lit(2.0);
    for (slot, (s, sv)) in prepared.splats.iter().zip(&prepared.saved).enumerate() {
        let i = s.index;
        for k in 0..3 {
            out.colors[3 * i + k] = d_color[slot][k];
        }
        out.opacity_logits[i] = d_opacity[slot] * s.opacity * (T::one() - s.opacity);

        // Conic -> covariance: dM = -Q dQ Q, dQ symmetric with both
        // off-diagonal entries equal.
        let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let dq = [[d_conic[slot][0], d_conic[slot][1]], [d_conic[slot][1], d_conic[slot][2]]];
        let mut tmp = [[zero; 2]; 2];
        let mut dm = [[zero; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                tmp[a][b] = dq[a][0] * q[0][b] + dq[a][1] * q[1][b];
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                dm[a][b] = -(q[a][0] * tmp[0][b] + q[a][1] * tmp[1][b]);
            }
        }

        // cov2d = A S A^T with A = J W.
        let a = &sv.jw;
        let mut d_cov3 = [[zero; 3]; 3];
        for c in 0..3 {
            for d in 0..3 {
                let mut acc = zero;
                for r in 0..2 {
                    for t in 0..2 {
                        acc += a[r][c] * dm[r][t] * a[t][d];
                    }
                }
                d_cov3[c][d] = acc;
            }
        }
        let mut d_a = [[zero; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = zero;
                for t in 0..2 {
                    for d in 0..3 {
                        acc += dm[r][t] * a[t][d] * sv.cov3d[d][c];
                    }
                }
                d_a[r][c] = two * acc;
            }
        }
        let d_j: [[T; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|b| d_a[r][0] * w[b][0] + d_a[r][1] * w[b][1] + d_a[r][2] * w[b][2]));

        let p = sv.cam_point;
        let iz = T::one() / p[2];
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let dmean = d_mean[slot];
        let dp = [
            dmean[0] * fx * iz - d_j[0][2] * fx * iz2,
            dmean[1] * fy * iz - d_j[1][2] * fy * iz2,
            -dmean[0] * fx * p[0] * iz2 - dmean[1] * fy * p[1] * iz2 - d_j[0][0] * fx * iz2 + d_j[0][2] * two * fx * p[0] * iz3
                - d_j[1][1] * fy * iz2
                + d_j[1][2] * two * fy * p[1] * iz3,
        ];
        for k in 0..3 {
            out.positions[3 * i + k] = w[0][k] * dp[0] + w[1][k] * dp[1] + w[2][k] * dp[2];
        }

        // cov3d = R V R^T, V = diag(exp(2 s)).
        let r = &sv.rotation;
        let mut d_r = [[zero; 3]; 3];
        for row in 0..3 {
            for k in 0..3 {
                let acc = d_cov3[row][0] * r[0][k] + d_cov3[row][1] * r[1][k] + d_cov3[row][2] * r[2][k];
                d_r[row][k] = two * acc * sv.variance[k];
            }
        }
        for k in 0..3 {
            let mut acc = zero;
            for ii in 0..3 {
                for jj in 0..3 {
                    acc += d_cov3[ii][jj] * r[ii][k] * r[jj][k];
                }
            }
            out.log_scales[3 * i + k] = acc * two * sv.variance[k];
        }
        let dq_unit = rotation_vjp(sv.quat_unit, &d_r);
        let qu = sv.quat_unit;
        let along = (0..4).map(|k| qu[k] * dq_unit[k]).sum::<T>();
        for k in 0..4 {
            out.rotations[4 * i + k] = (dq_unit[k] - qu[k] * along) / sv.quat_norm;
        }
    }
    out
}

/// Pulls `dL/dR` back to the unit quaternion `[w, x, y, z]`.
fn rotation_vjp<T: Scalar>(q: [T; 4], d: &Mat3<T>) -> [T; 4] {
    let [w, x, y, z] = q;
    let t = T::lit(2.0);
    let f = T::lit(4.0);
    let dw = t * (-z * d[0][1] + y * d[0][2] + z * d[1][0] - x * d[1][2] - y * d[2][0] + x * d[2][1]);
    let dx = t * (y * d[0][1] + z * d[0][2] + y * d[1][0] - w * d[1][2] + z * d[2][0] + w * d[2][1]) - f * x * (d[1][1] + d[2][2]);
    let dy = t * (x * d[0][1] + w * d[0][2] + x * d[1][0] + z * d[1][2] - w * d[2][0] + z * d[2][1]) - f * y * (d[0][0] + d[2][2]);
    let dz = t * (-w * d[0][1] + x * d[0][2] + w * d[1][0] + y * d[1][2] + x * d[2][0] + y * d[2][1]) - f * z * (d[0][0] + d[1][1]);
    [dw, dx, dy, dz]
}
