//! Synthetic dynamic scenes with known per-Gaussian trajectories.

use diffcore::DTensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::frames::{normalized_timestamps, FrameSet, Image};
use crate::gaussian::{Gaussian, GaussianSet};
use crate::render::{render, Camera, RenderConfig};

/// Opacity logit of a Gaussian before its appearance time.
pub const HIDDEN_LOGIT: f64 = -30.0;

/// How one Gaussian moves over `t` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// `mu(t) = mu_0 + velocity * t`.
    Linear { velocity: [f64; 3] },
    /// Circle of `radius` around `mu_0` in the plane spanned by `u` and `v`:
    /// `mu(t) = mu_0 + radius * (cos(a) u + sin(a) v)`, `a = phase + 2 pi turns t`.
    Orbital { radius: f64, u: [f64; 3], v: [f64; 3], phase: f64, turns: f64 },
    /// Static position; invisible before `appear_at`.
    Sudden { appear_at: f64 },
}

impl Trajectory {
    pub fn is_moving(&self) -> bool {
        matches!(self, Trajectory::Linear { .. } | Trajectory::Orbital { .. })
    }

    pub fn position(&self, base: [f64; 3], t: f64) -> [f64; 3] {
        match self {
            Trajectory::Static | Trajectory::Sudden { .. } => base,
            Trajectory::Linear { velocity } => std::array::from_fn(|k| base[k] + velocity[k] * t),
            Trajectory::Orbital { radius, u, v, phase, turns } => {
                let a = phase + 2.0 * std::f64::consts::PI * turns * t;
                std::array::from_fn(|k| base[k] + radius * (a.cos() * u[k] + a.sin() * v[k]))
            }
        }
    }

    pub fn visible(&self, t: f64) -> bool {
        match self {
            Trajectory::Sudden { appear_at } => t >= *appear_at,
            _ => true,
        }
    }
}

/// Numbers of Gaussians per trajectory kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryMix {
    pub static_count: usize,
    pub linear_count: usize,
    pub orbital_count: usize,
    pub sudden_count: usize,
}

impl TrajectoryMix {
    pub fn total(&self) -> usize {
        self.static_count + self.linear_count + self.orbital_count + self.sudden_count
    }
}

/// Missing fields in serialized form fall back to [`standard_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub mix: TrajectoryMix,
    pub frames: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Cameras are spread over `[-spread, spread]` radians of azimuth.
    pub camera_spread: f64,
    /// Canonical centers are uniform in `[-extent, extent]^3`.
    pub extent: f64,
    pub scale_range: [f64; 2],
    pub opacity_range: [f64; 2],
    pub color_range: [f64; 2],
    /// Largest displacement of a linear trajectory over the whole clip.
    pub max_travel: f64,
    pub orbit_radius_range: [f64; 2],
    pub appear_range: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        standard_scene()
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mix.total() == 0 {
            return contract("scene needs at least one Gaussian");
        }
        if self.frames < 2 {
            return contract(format!("scene needs at least 2 frames, got {}", self.frames));
        }
        if self.cameras == 0 || self.width == 0 || self.height == 0 {
            return contract("scene needs at least one camera and a non-empty image");
        }
        let ranges = [
            ("scale", self.scale_range),
            ("opacity", self.opacity_range),
            ("color", self.color_range),
            ("orbit radius", self.orbit_radius_range),
            ("appearance", self.appear_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return contract(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if !(self.scale_range[0] > 0.0) || !(self.opacity_range[0] > 0.0 && self.opacity_range[1] < 1.0) {
            return contract("scales must be positive and opacities inside (0, 1)");
        }
        Ok(())
    }

    /// Cameras on a ring around the origin, slightly above it.
    pub fn camera_rig(&self) -> Result<Vec<Camera>> {
        let elevation: f64 = 0.25;
        (0..self.cameras)
            .map(|k| {
                let az = if self.cameras == 1 {
                    0.0
                } else {
                    -self.camera_spread + 2.0 * self.camera_spread * k as f64 / (self.cameras - 1) as f64
                };
                let d = self.camera_distance;
                let eye = [d * az.sin() * elevation.cos(), -d * elevation.sin(), -d * az.cos() * elevation.cos()];
                Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], self.focal, self.width, self.height)
            })
            .collect()
    }
}

/// 50 Gaussians (20 static, 15 linear, 14 orbital, 1 sudden), 20 frames,
/// 2 cameras at 32x32.
pub fn standard_scene() -> SceneSpec {
    SceneSpec {
        mix: TrajectoryMix {
            static_count: 20,
            linear_count: 15,
            orbital_count: 14,
            sudden_count: 1,
        },
        frames: 20,
        cameras: 2,
        width: 32,
        height: 32,
        focal: 36.0,
        camera_distance: 4.0,
        camera_spread: 0.35,
        extent: 1.0,
        scale_range: [0.06, 0.16],
        opacity_range: [0.5, 0.9],
        color_range: [0.15, 1.0],
        max_travel: 0.6,
        orbit_radius_range: [0.1, 0.3],
        appear_range: [0.35, 0.65],
        seed: 2024,
    }
}

/// Canonical Gaussians with their exact trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub gaussians: Vec<GaussianRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub trajectory: Trajectory,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Exact Gaussian states at time `t`.
    pub fn state_at(&self, t: f64) -> Result<GaussianSet<f64>> {
        let n = self.len();
        let mut pos = Vec::with_capacity(3 * n);
        let mut rot = Vec::with_capacity(4 * n);
        let mut ls = Vec::with_capacity(3 * n);
        let mut op = Vec::with_capacity(n);
        let mut col = Vec::with_capacity(3 * n);
        for g in &self.gaussians {
            pos.extend(g.trajectory.position(g.mean, t));
            rot.extend(g.rotation);
            ls.extend(g.log_scale);
            op.push(if g.trajectory.visible(t) { g.opacity_logit } else { HIDDEN_LOGIT });
            col.extend(g.color);
        }
        GaussianSet::new(
            DTensor::new(&[n, 3], pos)?,
            DTensor::new(&[n, 4], rot)?,
            DTensor::new(&[n, 3], ls)?,
            DTensor::new(&[n], op)?,
            DTensor::new(&[n, 3], col)?,
        )
    }

    pub fn moving_mask(&self) -> Vec<bool> {
        self.gaussians.iter().map(|g| g.trajectory.is_moving()).collect()
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn orthonormal_pair(rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
    let u = unit_vector(rng);
    loop {
        let w = unit_vector(rng);
        let c = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if n > 0.3 {
            return (u, c.map(|x| x / n));
        }
    }
}

/// Draws canonical Gaussians and trajectories from `spec`.
pub fn ground_truth(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.mix;
    let mut kinds: Vec<u8> = [(0u8, m.static_count), (1, m.linear_count), (2, m.orbital_count), (3, m.sudden_count)]
        .iter()
        .flat_map(|&(k, c)| std::iter::repeat_n(k, c))
        .collect();
    kinds.shuffle(&mut rng);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut gaussians = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mean: [f64; 3] = std::array::from_fn(|_| rng.random_range(-spec.extent..spec.extent));
        let rotation = {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            v.map(|x| x / n)
        };
        let log_scale: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, spec.scale_range).ln());
        let o = uniform(&mut rng, spec.opacity_range);
        let color: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, spec.color_range));
        let trajectory = match kind {
            0 => Trajectory::Static,
            1 => {
                let dir = unit_vector(&mut rng);
                let len = rng.random_range(0.5 * spec.max_travel..=spec.max_travel);
                Trajectory::Linear { velocity: dir.map(|d| d * len) }
            }
            2 => {
                let (u, v) = orthonormal_pair(&mut rng);
                Trajectory::Orbital {
                    radius: uniform(&mut rng, spec.orbit_radius_range),
                    u,
                    v,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    turns: 1.0,
                }
            }
            _ => Trajectory::Sudden {
                appear_at: uniform(&mut rng, spec.appear_range),
            },
        };
        gaussians.push(GaussianRecord {
            mean,
            rotation,
            log_scale,
            opacity_logit: (o / (1.0 - o)).ln(),
            color,
            trajectory,
        });
    }
    Ok(GroundTruth { gaussians })
}

/// Ground truth plus every frame rendered from its exact state.
pub fn generate(spec: &SceneSpec) -> Result<FrameSet> {
    let gt = ground_truth(spec)?;
    let cameras = spec.camera_rig()?;
    let timestamps = normalized_timestamps(spec.frames);
    let cfg = RenderConfig::default();
    let mut images = Vec::with_capacity(timestamps.len() * cameras.len());
    for &t in &timestamps {
        let state = gt.state_at(t)?;
        for cam in &cameras {
            images.push(Image::from_rendered(&render(&state, cam, &cfg)?));
        }
    }
    let set = FrameSet {
        timestamps,
        cameras,
        images,
        ground_truth: Some(gt),
        spec: Some(spec.clone()),
    };
    set.validate()?;
    Ok(set)
}

/// Canonical Gaussians as a set, ignoring motion and appearance.
pub fn canonical_set(gt: &GroundTruth) -> Result<GaussianSet<f64>> {
    let rows: Vec<Gaussian<f64>> = gt
        .gaussians
        .iter()
        .map(|g| Gaussian {
            mean: g.mean,
            rotation: g.rotation,
            log_scale: g.log_scale,
            opacity: crate::gaussian::sigmoid(g.opacity_logit),
            color: g.color,
        })
        .collect();
    GaussianSet::from_gaussians(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mix: TrajectoryMix) -> SceneSpec {
        SceneSpec {
            mix,
            frames: 4,
            cameras: 1,
            width: 12,
            height: 12,
            ..standard_scene()
        }
    }

    #[test]
    fn static_scene_frames_identical() {
        let spec = small(TrajectoryMix {
            static_count: 6,
            linear_count: 0,
            orbital_count: 0,
            sudden_count: 0,
        });
        let set = generate(&spec).unwrap();
        for i in 1..set.frames() {
            assert_eq!(set.image(i, 0), set.image(0, 0));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = small(standard_scene().mix);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn standard_scene_contents() {
        let spec = standard_scene();
        assert_eq!(spec.mix.total(), 50);
        assert!(spec.mix.sudden_count >= 1);
        let gt = ground_truth(&spec).unwrap();
        assert!(gt.gaussians.iter().any(|g| matches!(g.trajectory, Trajectory::Sudden { .. })));
    }

    #[test]
    fn linear_motion_follows_velocity() {
        let t = Trajectory::Linear { velocity: [1.0, 0.0, -2.0] };
        assert_eq!(t.position([0.0, 1.0, 0.0], 0.5), [0.5, 1.0, -1.0]);
    }

    #[test]
    fn orbit_keeps_radius() {
        let t = Trajectory::Orbital {
            radius: 0.3,
            u: [1.0, 0.0, 0.0],
            v: [0.0, 0.0, 1.0],
            phase: 0.4,
            turns: 1.0,
        };
        for k in 0..10 {
            let p = t.position([0.0; 3], k as f64 / 9.0);
            assert!(((p[0] * p[0] + p[2] * p[2]).sqrt() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn sudden_gaussian_hidden_before_appearance() {
        let t = Trajectory::Sudden { appear_at: 0.5 };
        assert!(!t.visible(0.49) && t.visible(0.5));
    }

    #[test]
    fn one_frame_rejected() {
        let spec = SceneSpec { frames: 1, ..standard_scene() };
        assert!(generate(&spec).is_err());
    }
}
