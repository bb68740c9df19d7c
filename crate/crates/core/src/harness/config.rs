use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{AugmentSpec, OpenSetSplit};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadMode};
use crate::scoring::{DEFAULT_GRAM_POWER, DEFAULT_TPR};

/// Feature width of the 2-D preset.
pub const GAUSSIAN_FEATURE_DIM: usize = 8;
pub const GAUSSIAN_LATENT_DIM: usize = 2;
pub const IMAGE_LATENT_DIM: usize = 16;

/// Unknown-score settings applied after training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub gram_power: u32,
    pub weights: [f64; 3],
    pub tpr: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            gram_power: DEFAULT_GRAM_POWER,
            weights: [1.0, 1.0, 1.0],
            tpr: DEFAULT_TPR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// 0-based epochs at which the rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub augment: AugmentSpec,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// Known/unknown partition the model was trained on, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<OpenSetSplit>,
}

impl TrainConfig {
    /// Four-Gaussian 2-D setting: MLP backbone, 50 epochs at 0.05, no
    /// augmentation, reconstruction score alone.
    pub fn gaussian_2d(mode: HeadMode, num_classes: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr_initial: 0.05,
            lr_drop_epochs: vec![],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            seed,
            head: HeadConfig::new(mode, num_classes, GAUSSIAN_LATENT_DIM),
            backbone: BackboneConfig::mlp2d(GAUSSIAN_FEATURE_DIM, seed),
            augment: AugmentSpec::disabled(),
            scoring: ScoringConfig {
                weights: [1.0, 0.0, 0.0],
                ..ScoringConfig::default()
            },
            split: None,
        }
    }

    /// 28×28 grayscale setting: small conv backbone, 10 epochs at 0.05 with
    /// a ×0.1 drop at epoch 8.
    pub fn image(mode: HeadMode, num_classes: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr_initial: 0.05,
            lr_drop_epochs: vec![8],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            seed,
            head: HeadConfig::new(mode, num_classes, IMAGE_LATENT_DIM),
            backbone: BackboneConfig::smallconv(seed),
            augment: AugmentSpec {
                seed,
                ..AugmentSpec::default()
            },
            scoring: ScoringConfig::default(),
            split: None,
        }
    }

    /// The full-length schedule: 200 epochs at 0.4, batch 128, ×0.1 at
    /// epochs 130 and 190, 64-dimensional auto-encoder latents.
    pub fn full(mode: HeadMode, num_classes: usize, seed: u64) -> Self {
        let mut c = TrainConfig::image(mode, num_classes, seed);
        c.epochs = 200;
        c.batch_size = 128;
        c.lr_initial = 0.4;
        c.lr_drop_epochs = vec![130, 190];
        c.head.latent_dim = 64;
        c
    }

    pub fn preset(name: &str, mode: HeadMode, num_classes: usize, seed: u64) -> Result<Self> {
        match name {
            "gaussian-2d" => Ok(TrainConfig::gaussian_2d(mode, num_classes, seed)),
            "image" => Ok(TrainConfig::image(mode, num_classes, seed)),
            "full" => Ok(TrainConfig::full(mode, num_classes, seed)),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected gaussian-2d, image or full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid(format!("lr_initial must be non-negative, got {}", self.lr_initial)));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("lr_drop_epochs must be strictly increasing"));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::invalid(format!("lr drop at epoch {last} is past the last epoch")));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::invalid("lr_drop_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.scoring.gram_power < 1 {
            return Err(Error::invalid("gram_power must be at least 1"));
        }
        if !(self.scoring.tpr > 0.0 && self.scoring.tpr <= 1.0) {
            return Err(Error::invalid(format!("tpr must lie in (0, 1], got {}", self.scoring.tpr)));
        }
        if !self.scoring.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::invalid("score weights must be finite"));
        }
        if let Some(split) = &self.split {
            if split.num_known() != self.head.num_classes {
                return Err(Error::invalid(format!(
                    "split has {} known classes, head has {}",
                    split.num_known(),
                    self.head.num_classes
                )));
            }
        }
        self.head.validate()?;
        self.backbone.validate()?;
        self.augment.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr_initial * self.lr_drop_factor.powi(drops as i32)
    }
}
