use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (x right, y down, z forward). Pixel `(u, v)` is the integer image
/// index, so `cx = W/2` lands on a pixel center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = unit(sub(target, eye))?;
        let right = unit(cross(forward, up))?;
        // Image y points down.
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = [-dot(right, eye), -dot(down, eye), -dot(forward, eye)];
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
            near: 0.01,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return contract(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return contract(format!("image size {}x{} is empty", self.width, self.height));
        }
        if !(self.near >= 0.0) {
            return contract(format!("near plane {} is negative", self.near));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-10 {
                    return contract(format!("camera rotation is not orthonormal (R^T R [{i}][{j}] = {d})"));
                }
            }
        }
        let all = [self.fx, self.fy, self.cx, self.cy, self.near].into_iter().chain(self.translation).chain(r.iter().flatten().copied());
        if all.into_iter().any(|v| !v.is_finite()) {
            return contract("camera has non-finite parameters");
        }
        Ok(())
    }

    pub fn to_camera(&self, world: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * world[0] + r[i][1] * world[1] + r[i][2] * world[2] + self.translation[i])
    }

    /// Pixel position of a world point, `None` at or behind the near plane.
    pub fn project_point(&self, world: [f64; 3]) -> Option<[f64; 2]> {
        let p = self.to_camera(world);
        (p[2] > self.near).then(|| [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// World-space camera center.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        std::array::from_fn(|i| -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(a, a).sqrt();
    if !(n > 1e-12) {
        return contract("degenerate look-at configuration");
    }
    Ok(a.map(|v| v / n))
}
