//! Images and multi-camera frame sets.

use diffcore::Scalar;

use crate::error::{contract, Result};
use crate::render::{Camera, RenderedImage};
use crate::synth::{GroundTruth, SceneSpec};

/// Row-major `H x W x 3` RGB image stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return contract(format!("{width}x{height} RGB image needs {} values, got {}", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_rendered<T: Scalar>(img: &RenderedImage<T>) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.colors.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(v as f64)).collect()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let b = 3 * (y * self.width + x);
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }
}

/// `T` timestamps seen by `K` cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    /// Strictly increasing, in `[0, 1]`.
    pub timestamps: Vec<f64>,
    pub cameras: Vec<Camera>,
    /// Frame-major: image of frame `i`, camera `k` at `i * K + k`.
    pub images: Vec<Image>,
    pub ground_truth: Option<GroundTruth>,
    pub spec: Option<SceneSpec>,
}

impl FrameSet {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn image(&self, frame: usize, camera: usize) -> &Image {
        &self.images[frame * self.cameras.len() + camera]
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.is_empty() || self.cameras.is_empty() {
            return contract("a frame set needs at least one timestamp and one camera");
        }
        for (i, &t) in self.timestamps.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return contract(format!("timestamp {t} of frame {i} outside [0, 1]"));
            }
        }
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if w[1] == w[0] {
                return contract(format!("duplicate timestamp {} at frames {i} and {}", w[0], i + 1));
            }
            if w[1] < w[0] {
                return contract(format!("timestamps decrease between frames {i} and {}", i + 1));
            }
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        let want = self.timestamps.len() * self.cameras.len();
        if self.images.len() != want {
            return contract(format!("expected {want} images, found {}", self.images.len()));
        }
        for (idx, img) in self.images.iter().enumerate() {
            let cam = &self.cameras[idx % self.cameras.len()];
            if img.width != cam.width || img.height != cam.height {
                return contract(format!(
                    "image of frame {} camera {} is {}x{}, camera expects {}x{}",
                    idx / self.cameras.len(),
                    idx % self.cameras.len(),
                    img.width,
                    img.height,
                    cam.width,
                    cam.height
                ));
            }
        }
        Ok(())
    }
}

/// `t_i = i / (T - 1)`, or `[0]` for a single frame.
pub fn normalized_timestamps(frames: usize) -> Vec<f64> {
    if frames == 1 {
        return vec![0.0];
    }
    (0..frames).map(|i| i as f64 / (frames - 1) as f64).collect()
}
