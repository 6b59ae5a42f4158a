use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::model::BackboneName;
use crate::transforms::Normalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `g(f(x))` trained on segmentation loss alone.
    Baseline,
    /// Warm-up as baseline, then joint training with the reversed bias head.
    Lntl,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::Lntl => "lntl",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Scheme::Baseline),
            "lntl" => Ok(Scheme::Lntl),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected baseline or lntl)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `root/<split>/{images,masks}` with a `manifest.json` describing classes.
    Folder,
    Cityscapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDataset {
    pub name: String,
    pub root: PathBuf,
    #[serde(default = "default_val_split")]
    pub split: Split,
}

fn default_val_split() -> Split {
    Split::Val
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    pub root: PathBuf,
    pub train_split: Split,
    pub val_split: Split,
    /// When set, the train split is cut in order into train/val with this
    /// fraction and `val_split` is not read.
    pub train_fraction: Option<f64>,
    /// Additional validation sets whose loss is tracked every epoch.
    pub extra_val: Vec<NamedDataset>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Folder,
            root: PathBuf::from("data"),
            train_split: Split::Train,
            val_split: Split::Val,
            train_fraction: None,
            extra_val: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneName,
    pub width: usize,
    pub depth: usize,
    /// Defaults to the boundary before the classifier convolution.
    pub fork_index: Option<usize>,
    pub bias_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneName::MiniSeg,
            width: 32,
            depth: 3,
            fork_index: None,
            bias_hidden: 32,
        }
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub warmup_epochs: usize,
    /// Gradient-reversal scale applied to the bias gradient entering `f`.
    pub grl_scale: f64,
    /// Ramp the reversal scale linearly from 0 to `grl_scale` over the adversarial epochs.
    pub grl_ramp: bool,
    /// Weight of the bias-head loss in the joint objective.
    pub bias_loss_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bias_bins: usize,
    pub normalization: Normalization,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Baseline,
            epochs: 100,
            base_lr: 0.001,
            lr_step: 40,
            lr_gamma: 0.1,
            warmup_epochs: 5,
            grl_scale: 1.0,
            grl_ramp: false,
            bias_loss_weight: 1.0,
            batch_size: 8,
            seed: 0,
            bias_bins: 4,
            normalization: Normalization::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return err("epochs must be > 0".into());
        }
        if self.warmup_epochs >= self.epochs {
            return err(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return err(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return err(format!("lr_gamma must be in (0, 1], got {}", self.lr_gamma));
        }
        if self.lr_step == 0 {
            return err("lr_step must be > 0".into());
        }
        if !(self.grl_scale >= 0.0) || !self.grl_scale.is_finite() {
            return err(format!("grl_scale must be >= 0, got {}", self.grl_scale));
        }
        if !(self.bias_loss_weight >= 0.0) || !self.bias_loss_weight.is_finite() {
            return err(format!("bias_loss_weight must be >= 0, got {}", self.bias_loss_weight));
        }
        if self.batch_size == 0 {
            return err("batch_size must be > 0".into());
        }
        if self.model.width == 0 || self.model.bias_hidden == 0 {
            return err("model width and bias_hidden must be > 0".into());
        }
        if self.model.backbone != BackboneName::MiniSeg {
            return err("only the mini_seg backbone can be built from a config file".into());
        }
        if let Some(f) = self.data.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return err(format!("train_fraction must be in (0, 1), got {f}"));
            }
        }
        crate::transforms::BiasLabelSpec::new(self.bias_bins)?;
        self.normalization.validate()?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }

    /// Reversal scale used during `epoch` (0 before the adversarial phase).
    pub fn grl_scale_at(&self, epoch: usize) -> f64 {
        if self.scheme != Scheme::Lntl || epoch < self.warmup_epochs {
            return 0.0;
        }
        if !self.grl_ramp {
            return self.grl_scale;
        }
        let span = (self.epochs - self.warmup_epochs) as f64;
        self.grl_scale * ((epoch - self.warmup_epochs + 1) as f64 / span)
    }
}

/// `base_lr * gamma^floor(epoch / lr_step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    super::optim::step_lr(epoch, cfg.base_lr, cfg.lr_step, cfg.lr_gamma)
}
