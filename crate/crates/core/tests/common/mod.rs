#![allow(dead_code)]

use dyngs::gaussian::{Gaussian, GaussianSet};
use dyngs::render::Camera;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-pixel evaluation of the splat density and the blend sum with no
/// thresholds, written directly from the definitions with nalgebra.
pub fn brute_force_render(set: &GaussianSet<f64>, cam: &Camera, dilation: f64) -> Vec<f64> {
    let w = Matrix3::from_fn(|i, j| cam.rotation[i][j]);
    let t = Vector3::from(cam.translation);
    struct Splat {
        depth: f64,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
        opacity: f64,
        color: Vector3<f64>,
    }
    let mut splats = Vec::new();
    for i in 0..set.len() {
        let g = set.gaussian(i);
        let mu = Vector3::from(g.mean);
        let p = w * mu + t;
        if p.z <= cam.near {
            continue;
        }
        let q = g.rotation;
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&Vector3::from(g.log_scale.map(f64::exp)));
        let sigma = rot * s * s.transpose() * rot.transpose();
        let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / (p.z * p.z), 0.0, cam.fy / p.z, -cam.fy * p.y / (p.z * p.z));
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * dilation;
        splats.push(Splat {
            depth: p.z,
            mean: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
            inv: cov.try_inverse().expect("dilated covariance is invertible"),
            opacity: g.opacity,
            color: Vector3::from(g.color),
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    let mut out = Vec::with_capacity(cam.width * cam.height * 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64, y as f64);
            let mut c = Vector3::zeros();
            for (k, s) in splats.iter().enumerate() {
                let d = px - s.mean;
                let alpha = s.opacity * (-0.5 * (d.transpose() * s.inv * d)[0]).exp();
                let occlusion: f64 = splats[..k]
                    .iter()
                    .map(|o| {
                        let d = px - o.mean;
                        1.0 - o.opacity * (-0.5 * (d.transpose() * o.inv * d)[0]).exp()
                    })
                    .product();
                c += s.color * alpha * occlusion;
            }
            out.extend(c.iter());
        }
    }
    out
}

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() > 0.05 {
            return q;
        }
    }
}

/// Up to `max_n` Gaussians near the origin with opacities well inside the
/// clamp range.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianSet<f64> {
    let rows: Vec<Gaussian<f64>> = (0..n)
        .map(|_| Gaussian {
            mean: std::array::from_fn(|_| rng.random_range(-0.8..0.8)),
            rotation: random_quat(rng),
            log_scale: std::array::from_fn(|_| rng.random_range(-2.0..-0.8)),
            opacity: rng.random_range(0.2..0.8),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        })
        .collect();
    GaussianSet::from_gaussians(&rows).unwrap()
}

pub fn random_camera(rng: &mut impl Rng, size: usize) -> Camera {
    let eye = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), -4.0];
    Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 1.1 * size as f64, size, size).unwrap()
}

/// Seven Gaussians of every trajectory kind, 6 frames, 12x12 pixels.
pub fn small_scene() -> dyngs::synth::SceneSpec {
    dyngs::synth::SceneSpec {
        mix: dyngs::synth::TrajectoryMix {
            static_count: 3,
            linear_count: 2,
            orbital_count: 1,
            sudden_count: 1,
        },
        frames: 6,
        width: 12,
        height: 12,
        focal: 14.0,
        ..dyngs::synth::standard_scene()
    }
}

/// Narrow networks so a step takes milliseconds.
pub fn small_config(iterations: usize) -> dyngs::trainer::TrainConfig {
    let mut cfg = dyngs::trainer::TrainConfig {
        batch: 2,
        iterations,
        ..Default::default()
    };
    cfg.deform.width = 32;
    cfg.deform.depth = 3;
    cfg.encoder.layers = 2;
    cfg.encoder.hidden = 32;
    cfg
}
