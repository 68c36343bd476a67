//! Pinhole projection of 3D Gaussians and differentiable alpha compositing.

mod camera;
mod raster;

use diffcore::{Backward, DTensor, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

pub use camera::Camera;
pub use raster::{composite_pixel, project, Projected2DGaussian};

use crate::error::{contract, Result};
use crate::gaussian::{BoundGaussians, GaussianSet};
use raster::{prepare, rasterize, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Upper clamp on per-splat alpha; `None` disables it.
    pub alpha_max: Option<f64>,
    /// Splats with alpha below this are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
    /// Added to the diagonal of every projected covariance, in pixels².
    pub dilation: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_max: Some(0.99),
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            dilation: 0.3,
            background: [0.0; 3],
        }
    }
}

impl RenderConfig {
    /// Clamp, skip and early exit disabled.
    pub fn exact() -> Self {
        Self {
            alpha_max: None,
            alpha_min: 0.0,
            transmittance_min: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage<T = f64> {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3`.
    pub colors: Vec<T>,
    /// Row-major `H x W`.
    pub transmittance: Vec<T>,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let b = 3 * (y * self.width + x);
        [self.colors[b], self.colors[b + 1], self.colors[b + 2]]
    }

    pub fn to_tensor(&self) -> DTensor<T> {
        DTensor::new(&[self.height, self.width, 3], self.colors.clone()).expect("image buffer matches its size")
    }
}

fn params<T: Scalar>(set: &GaussianSet<T>) -> Params<'_, T> {
    Params {
        positions: set.positions.data(),
        rotations: set.rotations.data(),
        log_scales: set.log_scales.data(),
        opacity_logits: set.opacity_logits.data(),
        colors: set.colors.data(),
    }
}

/// Renders `set` through `cam` with a global front-to-back depth sort.
pub fn render<T: Scalar>(set: &GaussianSet<T>, cam: &Camera, cfg: &RenderConfig) -> Result<RenderedImage<T>> {
    cam.validate()?;
    set.validate()?;
    let prepared = prepare(&params(set), cam, cfg)?;
    let (colors, transmittance) = rasterize(&prepared, cam, cfg);
    Ok(RenderedImage {
        width: cam.width,
        height: cam.height,
        colors,
        transmittance,
    })
}

/// Projected splats of `set`, sorted front to back.
pub fn project_all<T: Scalar>(set: &GaussianSet<T>, cam: &Camera, cfg: &RenderConfig) -> Result<Vec<Projected2DGaussian<T>>> {
    Ok(prepare(&params(set), cam, cfg)?.splats)
}

#[derive(Debug)]
struct RenderRule {
    cam: Camera,
    cfg: RenderConfig,
}

impl<T: Scalar> Backward<T> for RenderRule {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let p = Params {
            positions: inputs[0].data(),
            rotations: inputs[1].data(),
            log_scales: inputs[2].data(),
            opacity_logits: inputs[3].data(),
            colors: inputs[4].data(),
        };
        let prepared = prepare(&p, &self.cam, &self.cfg).expect("inputs were validated by the forward pass");
        let g = raster::backward(&prepared, p.len(), &self.cam, &self.cfg, grad);
        vec![Some(g.positions), Some(g.rotations), Some(g.log_scales), Some(g.opacity_logits), Some(g.colors)]
    }
}

/// Records a render of the bound Gaussians; the result is an `[H, W, 3]`
/// image whose gradient flows to all five parameter fields.
pub fn render_on_tape<T: Scalar>(tape: &mut Tape<T>, g: &BoundGaussians, cam: &Camera, cfg: &RenderConfig) -> Result<Var> {
    cam.validate()?;
    let n = tape.shape(g.opacity_logits).first().copied().unwrap_or(0);
    let expect: [(Var, &[usize]); 5] = [
        (g.positions, &[n, 3]),
        (g.rotations, &[n, 4]),
        (g.log_scales, &[n, 3]),
        (g.opacity_logits, &[n]),
        (g.colors, &[n, 3]),
    ];
    for (v, shape) in expect {
        if tape.shape(v) != shape {
            return contract(format!("render input has shape {:?}, expected {shape:?}", tape.shape(v)));
        }
    }
    let p = Params {
        positions: tape.data(g.positions),
        rotations: tape.data(g.rotations),
        log_scales: tape.data(g.log_scales),
        opacity_logits: tape.data(g.opacity_logits),
        colors: tape.data(g.colors),
    };
    let prepared = prepare(&p, cam, cfg)?;
    let (colors, _) = rasterize(&prepared, cam, cfg);
    let out = DTensor::new(&[cam.height, cam.width, 3], colors)?;
    let rule = RenderRule {
        cam: cam.clone(),
        cfg: cfg.clone(),
    };
    Ok(tape.custom(&g.vars(), out, Box::new(rule)))
}

fn abs_motion<T: Scalar>(set: &GaussianSet<T>, d_position: &DTensor<T>) -> Result<Vec<T>> {
    if d_position.shape() != [set.len(), 3] {
        return contract(format!("motion has shape {:?}, expected [{}, 3]", d_position.shape(), set.len()));
    }
    Ok(d_position.data().iter().map(|v| v.abs()).collect())
}

/// Composites `|d_position|` as color with the set's own opacities, without
/// normalization.
pub fn render_motion_raw<T: Scalar>(set: &GaussianSet<T>, d_position: &DTensor<T>, cam: &Camera, cfg: &RenderConfig) -> Result<RenderedImage<T>> {
    let colors = abs_motion(set, d_position)?;
    render(&set.with_colors(DTensor::new(&[set.len(), 3], colors)?)?, cam, cfg)
}

/// Motion heatmap: `|d_position|` divided by its 99th percentile over all
/// Gaussians and channels, clipped to `[0, 1]`, composited as color.
pub fn render_motion<T: Scalar>(set: &GaussianSet<T>, d_position: &DTensor<T>, cam: &Camera, cfg: &RenderConfig) -> Result<RenderedImage<T>> {
    let mut colors = abs_motion(set, d_position)?;
    let scale = percentile(&colors, 0.99);
    if scale > T::zero() {
        colors.iter_mut().for_each(|v| *v = (*v / scale).min(T::one()));
    }
    render(&set.with_colors(DTensor::new(&[set.len(), 3], colors)?)?, cam, cfg)
}

/// Nearest-rank percentile; `q` in `[0, 1]`.
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite motion"));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;

    fn cam(size: usize) -> Camera {
        Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 20.0, size, size).unwrap()
    }

    fn blob(mean: [f64; 3], opacity: f64, color: [f64; 3]) -> Gaussian<f64> {
        Gaussian {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.2f64.ln(); 3],
            opacity,
            color,
        }
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let p = project(&blob([0.0; 3], 0.5, [1.0; 3]), &cam(16), &RenderConfig::default()).unwrap().unwrap();
        assert_eq!(p.mean2d, [8.0, 8.0]);
        assert_eq!(p.depth, 4.0);
    }

    #[test]
    fn isotropic_projection_closed_form() {
        let sigma = 0.2;
        let p = project(&blob([0.0; 3], 0.5, [1.0; 3]), &cam(16), &RenderConfig::default()).unwrap().unwrap();
        let want = (20.0 * sigma / 4.0f64).powi(2) + 0.3;
        assert!((p.cov2d[0][0] - want).abs() < 1e-12);
        assert!((p.cov2d[1][1] - want).abs() < 1e-12);
        assert!(p.cov2d[0][1].abs() < 1e-15);
    }

    #[test]
    fn near_plane_culls() {
        let g = blob([0.0, 0.0, -4.0], 0.5, [1.0; 3]);
        assert!(project(&g, &cam(16), &RenderConfig::default()).unwrap().is_none());
    }

    #[test]
    fn empty_list_is_background() {
        let (c, t) = composite_pixel::<f64>([0.0, 0.0], &[], &RenderConfig::default());
        assert_eq!(c, [0.0; 3]);
        assert_eq!(t, 1.0);
    }

    #[test]
    fn single_splat_at_center() {
        let cfg = RenderConfig::default();
        let p = project(&blob([0.0; 3], 0.6, [0.2, 0.4, 1.0]), &cam(16), &cfg).unwrap().unwrap();
        let (c, t) = composite_pixel(p.mean2d, &[p], &cfg);
        assert_eq!(c, [0.2 * 0.6, 0.4 * 0.6, 0.6]);
        assert!((t - 0.4).abs() < 1e-15);
        let opaque = Projected2DGaussian { opacity: 1.0, ..p };
        let (c, _) = composite_pixel(p.mean2d, &[opaque], &cfg);
        assert_eq!(c[2], 0.99);
    }

    #[test]
    fn two_splats_blend_in_order() {
        let cfg = RenderConfig::default();
        let a = project(&blob([0.0; 3], 0.6, [1.0, 0.0, 0.0]), &cam(16), &cfg).unwrap().unwrap();
        let b = project(&blob([0.0, 0.0, 1.0], 0.5, [0.0, 1.0, 0.0]), &cam(16), &cfg).unwrap().unwrap();
        let (c, _) = composite_pixel(a.mean2d, &[a, b], &cfg);
        assert!((c[0] - 0.6).abs() < 1e-15);
        assert!((c[1] - 0.5 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn render_sorts_by_depth() {
        let cfg = RenderConfig::default();
        let back_first = GaussianSet::from_gaussians(&[blob([0.0, 0.0, 1.0], 0.5, [0.0, 1.0, 0.0]), blob([0.0; 3], 0.6, [1.0, 0.0, 0.0])]).unwrap();
        let img = render(&back_first, &cam(16), &cfg).unwrap();
        let c = img.pixel(8, 8);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_parameter_names_index() {
        let mut set = GaussianSet::from_gaussians(&[blob([0.0; 3], 0.5, [1.0; 3]), blob([0.1; 3], 0.5, [1.0; 3])]).unwrap();
        set.colors.data_mut()[4] = f64::NAN;
        let err = render(&set, &cam(8), &RenderConfig::default()).unwrap_err();
        assert!(err.to_string().contains("Gaussian 1"), "{err}");
    }

    #[test]
    fn zero_motion_is_black() {
        let set = GaussianSet::from_gaussians(&[blob([0.0; 3], 0.9, [1.0; 3])]).unwrap();
        let img = render_motion(&set, &DTensor::zeros(&[1, 3]), &cam(8), &RenderConfig::default()).unwrap();
        assert!(img.colors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_motion_single_term() {
        let set = GaussianSet::from_gaussians(&[blob([0.0; 3], 0.9, [1.0; 3])]).unwrap();
        let motion = DTensor::new(&[1, 3], vec![0.5, 0.0, 0.0]).unwrap();
        let img = render_motion_raw(&set, &motion, &cam(16), &RenderConfig::default()).unwrap();
        let c = img.pixel(8, 8);
        assert!((c[0] - 0.5 * 0.9).abs() < 1e-12, "{c:?}");
        assert_eq!(&c[1..], &[0.0, 0.0]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
    }
}
