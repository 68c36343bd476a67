use diffcore::Scalar;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, Sampling, TrainConfig};
use crate::error::Result;
use crate::frames::FrameSet;

/// Axes of an ablation; the grid is their Cartesian product, each
/// configuration trained once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub batch: Vec<usize>,
    pub layers: Vec<usize>,
    pub sampling: Vec<Sampling>,
    pub shared_weights: Vec<bool>,
    /// Adds a row set with the encoder disabled.
    pub include_baseline: bool,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            batch: vec![4],
            layers: vec![4],
            sampling: vec![Sampling::Random],
            shared_weights: vec![true],
            include_baseline: false,
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub encoder: bool,
    pub batch: usize,
    pub layers: usize,
    pub sampling: Sampling,
    pub shared_weights: bool,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Trains every grid point from `base` and evaluates it on held-out frames.
pub fn ablate<T: Scalar>(set: &FrameSet, base: &TrainConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let mut configs = Vec::new();
    for &batch in &grid.batch {
        for &sampling in &grid.sampling {
            if grid.include_baseline {
                configs.push(TrainConfig {
                    batch,
                    sampling,
                    encoder_enabled: false,
                    ..base.clone()
                });
            }
            for &layers in &grid.layers {
                for &shared in &grid.shared_weights {
                    let mut cfg = TrainConfig {
                        batch,
                        sampling,
                        shared_weights: shared,
                        encoder_enabled: true,
                        ..base.clone()
                    };
                    cfg.encoder.layers = layers;
                    configs.push(cfg);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for cfg in configs {
        for &seed in &grid.seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let state = train::<T>(set, cfg.clone())?;
            let report = evaluate(&state, set, &cfg.test_frames(set.frames()))?;
            rows.push(AblationRow {
                encoder: cfg.encoder_enabled,
                batch: cfg.batch,
                layers: if cfg.encoder_enabled { cfg.encoder.layers } else { 0 },
                sampling: cfg.sampling,
                shared_weights: cfg.shared_weights,
                seed,
                psnr: report.mean_psnr(),
                ssim: report.mean_ssim(),
            });
        }
    }
    Ok(rows)
}
