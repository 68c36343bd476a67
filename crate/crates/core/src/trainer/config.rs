use serde::{Deserialize, Serialize};

use crate::deform::DeformConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::render::RenderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// B distinct training frames drawn without replacement.
    Random,
    /// B consecutive training frames from a uniform random start.
    Continuous,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampling::Random),
            "continuous" => Ok(Sampling::Continuous),
            other => Err(Error::Config(format!("unknown sampling strategy {other:?} (expected random or continuous)"))),
        }
    }
}

/// Initial learning rates; all decay exponentially to `final_ratio` times
/// their start value over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub deformation: f64,
    pub encoder: f64,
    pub final_ratio: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            deformation: 1.6e-3,
            encoder: 1.6e-4,
            final_ratio: 0.1,
        }
    }
}

/// Starting point of the canonical Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Gaussian count when the dataset has no ground truth.
    pub gaussians: usize,
    /// Std. dev. of the noise added to ground-truth first-frame centers.
    pub position_noise: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    /// Half-width of the cube used for random centers without ground truth.
    pub extent: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gaussians: 50,
            position_noise: 0.02,
            scale: 0.1,
            opacity: 0.5,
            color: 0.5,
            extent: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Timestamps per step (B).
    pub batch: usize,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub sampling: Sampling,
    pub iterations: usize,
    pub seed: u64,
    pub encoder_enabled: bool,
    pub shared_weights: bool,
    /// Render the encoder branch at `mu + O_i + d_mu` instead of `mu + d_mu`.
    pub offset_in_render: bool,
    /// Every `holdout_stride`-th frame, starting at `holdout_offset`, is
    /// held out of training.
    pub holdout_stride: usize,
    pub holdout_offset: usize,
    pub lr: LearningRates,
    pub init: InitConfig,
    pub deform: DeformConfig,
    pub encoder: EncoderConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            lambda_c: 1.0,
            lambda_t: 0.8,
            sampling: Sampling::Random,
            iterations: 3000,
            seed: 0,
            encoder_enabled: true,
            shared_weights: true,
            offset_in_render: false,
            holdout_stride: 5,
            holdout_offset: 2,
            lr: LearningRates::default(),
            init: InitConfig::default(),
            deform: DeformConfig::default(),
            encoder: EncoderConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Two-stream configuration with the encoder switched off.
    pub fn baseline() -> Self {
        Self {
            encoder_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.encoder_enabled && !(self.lambda_c > self.lambda_t && self.lambda_t > 0.0) {
            return bad(format!("two-stream weights need lambda_c > lambda_t > 0, got {} and {}", self.lambda_c, self.lambda_t));
        }
        if !(self.lambda_c > 0.0) {
            return bad(format!("lambda_c must be positive, got {}", self.lambda_c));
        }
        if self.holdout_stride == 1 {
            return bad("holdout_stride 1 leaves no training frames".into());
        }
        let lr = &self.lr;
        let rates = [lr.position, lr.rotation, lr.scale, lr.opacity, lr.color, lr.deformation, lr.encoder];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || !(lr.final_ratio > 0.0 && lr.final_ratio <= 1.0) {
            return bad(format!("invalid learning rates {lr:?}"));
        }
        self.deform.validate()?;
        if self.encoder_enabled {
            self.encoder.validate()?;
            if self.encoder.octaves != self.deform.octaves {
                return bad("encoder and deformation field must use the same octave count".into());
            }
        }
        Ok(())
    }

    /// Frames used for training, in increasing order.
    pub fn train_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames).filter(|i| !self.is_held_out(*i)).collect()
    }

    pub fn test_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames).filter(|i| self.is_held_out(*i)).collect()
    }

    fn is_held_out(&self, frame: usize) -> bool {
        self.holdout_stride > 0 && frame % self.holdout_stride == self.holdout_offset % self.holdout_stride
    }

    /// Parses a TOML document; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::baseline().validate().unwrap();
    }

    #[test]
    fn loss_weights_ordered() {
        let cfg = TrainConfig {
            lambda_t: 1.2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn standard_split() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.test_frames(20), vec![2, 7, 12, 17]);
        assert_eq!(cfg.train_frames(20).len(), 16);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            sampling: Sampling::Continuous,
            iterations: 7,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = TrainConfig::from_toml("iterations = 10\n[lr]\ncolor = 0.01\n").unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.lr.color, 0.01);
        assert_eq!(cfg.lr.position, 1.6e-4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_toml("iterashuns = 3").is_err());
    }
}
