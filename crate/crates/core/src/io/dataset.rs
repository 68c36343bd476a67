//! Dataset directory:
//!
//! ```text
//! manifest.json      format tag, version, cameras, frames, spec echo
//! images/fNNN_cK.f32 raw float image (exact)
//! images/fNNN_cK.png 8-bit preview
//! ground_truth.json  canonical Gaussians and trajectories (optional)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw::{read_raw_image, write_raw_image};
use super::{write_atomic, write_png};
use crate::error::{io_err, Error, Result};
use crate::frames::FrameSet;
use crate::render::Camera;
use crate::synth::{GroundTruth, SceneSpec};

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "dyngs-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    cameras: Vec<Camera>,
    frames: Vec<FrameEntry>,
    ground_truth: Option<String>,
    spec: Option<SceneSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    timestamp: f64,
    /// Raw image per camera, relative to the dataset root.
    images: Vec<String>,
    previews: Vec<String>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_dataset(set: &FrameSet, dir: &Path) -> Result<()> {
    set.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut frames = Vec::with_capacity(set.frames());
    for (i, &t) in set.timestamps.iter().enumerate() {
        let mut entry = FrameEntry {
            timestamp: t,
            images: Vec::new(),
            previews: Vec::new(),
        };
        for k in 0..set.cameras.len() {
            let raw = format!("images/f{i:03}_c{k}.f32");
            let png = format!("images/f{i:03}_c{k}.png");
            write_raw_image(set.image(i, k), &dir.join(&raw))?;
            write_png(set.image(i, k), &dir.join(&png))?;
            entry.images.push(raw);
            entry.previews.push(png);
        }
        frames.push(entry);
    }
    let ground_truth = match &set.ground_truth {
        Some(gt) => {
            let text = serde_json::to_string_pretty(gt).expect("ground truth serializes");
            write_atomic(&dir.join("ground_truth.json"), text.as_bytes())?;
            Some("ground_truth.json".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        cameras: set.cameras.clone(),
        frames,
        ground_truth,
        spec: set.spec.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

/// Loads and validates a dataset. A missing ground-truth entry yields
/// `ground_truth: None`.
pub fn load_dataset(dir: &Path) -> Result<FrameSet> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, format!("line {}, column {}: {e}", e.line(), e.column())))?;
    if manifest.format != FORMAT {
        return Err(format_err(&path, format!("format tag {:?} is not {FORMAT:?}", manifest.format)));
    }
    if manifest.version > DATASET_VERSION {
        return Err(Error::Version {
            path,
            found: manifest.version,
            supported: DATASET_VERSION,
        });
    }
    let k = manifest.cameras.len();
    let mut images = Vec::with_capacity(manifest.frames.len() * k);
    for (i, frame) in manifest.frames.iter().enumerate() {
        if frame.images.len() != k {
            return Err(format_err(&path, format!("frames[{i}].images lists {} images for {k} cameras", frame.images.len())));
        }
        for (c, rel) in frame.images.iter().enumerate() {
            images.push(read_raw_image(&dir.join(rel), &format!("frame {i} camera {c}"))?);
        }
    }
    let ground_truth = match &manifest.ground_truth {
        Some(rel) => {
            let gt_path = dir.join(rel);
            let text = fs::read_to_string(&gt_path).map_err(io_err(&gt_path))?;
            let gt: GroundTruth =
                serde_json::from_str(&text).map_err(|e| format_err(&gt_path, format!("line {}, column {}: {e}", e.line(), e.column())))?;
            Some(gt)
        }
        None => None,
    };
    let set = FrameSet {
        timestamps: manifest.frames.iter().map(|f| f.timestamp).collect(),
        cameras: manifest.cameras,
        images,
        ground_truth,
        spec: manifest.spec,
    };
    set.validate()?;
    Ok(set)
}
