//! Experiment configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::backbone::BackboneConfig;
use crate::heads::HeadsConfig;
use crate::model::{FprFeature, LossWeights, ModelConfig, Variant};

/// Desk-scale replacements applied on top of the full-scale settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskOverrides {
    pub epochs: Option<usize>,
    pub base_channels: Option<usize>,
    pub crop_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub variant: Variant,
    /// Pooling source of the classifier; must be absent for N1.
    pub fpr_feature: Option<FprFeature>,
    pub rotate_aug: bool,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factors: Vec<f64>,
    pub seed: u64,
    pub batch_size: usize,
    /// Global L2 bound on each update's gradient; 0 disables clipping.
    pub grad_clip: f64,
    /// Random training crops of this side length when volumes are larger.
    pub crop_size: Option<usize>,
    pub folds: usize,
    pub min_readers: usize,
    /// Checkpoints retained per run (oldest removed first); 0 keeps all.
    pub keep_checkpoints: usize,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub loss_weights: LossWeights,
    pub desk: Option<DeskOverrides>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            variant: Variant::N3,
            fpr_feature: Some(FprFeature::Fd),
            rotate_aug: false,
            epochs: 200,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![100, 160],
            lr_factors: vec![0.1, 0.01],
            seed: 0,
            batch_size: 1,
            grad_clip: 5.0,
            crop_size: None,
            folds: 6,
            min_readers: 3,
            keep_checkpoints: 2,
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
            loss_weights: LossWeights::default(),
            desk: None,
        }
    }
}

/// A rejected configuration, naming the offending key.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses JSON, rejecting unknown keys, then validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("<document>")
                .to_string();
            bad(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Settings with desk overrides folded in.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Some(d) = &self.desk {
            if let Some(e) = d.epochs {
                out.epochs = e;
                out.lr_milestones.retain(|&m| m < e);
                out.lr_factors.truncate(out.lr_milestones.len());
            }
            if let Some(c) = d.base_channels {
                out.backbone.base_channels = c;
            }
            if let Some(c) = d.crop_size {
                out.crop_size = Some(c);
            }
            out.desk = None;
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = self.resolved();
        if r.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if !(r.lr0 > 0.0 && r.lr0.is_finite()) {
            return Err(bad("lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&r.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if !(r.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if r.lr_milestones.len() != r.lr_factors.len() {
            return Err(bad("lr_factors", "needs one factor per milestone"));
        }
        if r.lr_milestones.windows(2).any(|w| w[0] >= w[1]) || r.lr_milestones.iter().any(|&m| m >= r.epochs) {
            return Err(bad("lr_milestones", "must be strictly increasing and below epochs"));
        }
        if r.lr_factors.iter().any(|&f| !(f > 0.0)) || r.lr_factors.windows(2).any(|w| w[0] <= w[1]) {
            return Err(bad("lr_factors", "must be positive and decreasing"));
        }
        match (r.variant, r.fpr_feature) {
            (Variant::N1, Some(_)) => return Err(bad("fpr_feature", "only applies to N2 and N3")),
            (Variant::N2 | Variant::N3, None) => return Err(bad("fpr_feature", "required for N2 and N3")),
            _ => {}
        }
        if !(r.grad_clip >= 0.0 && r.grad_clip.is_finite()) {
            return Err(bad("grad_clip", "must be finite and non-negative"));
        }
        if r.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if let Some(c) = r.crop_size {
            if c == 0 || c % 8 != 0 {
                return Err(bad("crop_size", "must be a positive multiple of 8"));
            }
        }
        if r.folds < 2 {
            return Err(bad("folds", "must be at least 2"));
        }
        if !(1..=4).contains(&r.min_readers) {
            return Err(bad("min_readers", "must lie in 1..=4"));
        }
        r.backbone.validate().map_err(|e| bad("backbone", e.to_string()))?;
        r.heads.validate().map_err(|e| bad("heads", e))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let r = self.resolved();
        ModelConfig {
            variant: r.variant,
            fpr_feature: r.fpr_feature.unwrap_or_default(),
            backbone: r.backbone,
            heads: r.heads,
        }
    }

    /// Short variant label such as `N3_Fd_R`.
    pub fn variant_label(&self) -> String {
        let mut s = format!("{:?}", self.variant);
        if let (Variant::N2 | Variant::N3, Some(f)) = (self.variant, self.fpr_feature) {
            s.push_str(&format!("_{f:?}"));
        }
        if self.rotate_aug {
            s.push_str("_R");
        }
        s
    }
}

/// Step schedule: `lr0` times the factor of the last milestone reached.
pub fn lr_at(epoch: usize, config: &ExperimentConfig) -> Result<f64, TrainError> {
    let r = config.resolved();
    if epoch >= r.epochs {
        return Err(TrainError::EpochOutOfRange { epoch, epochs: r.epochs });
    }
    let factor = r
        .lr_milestones
        .iter()
        .zip(&r.lr_factors)
        .filter(|(m, _)| epoch >= **m)
        .map(|(_, f)| *f)
        .last()
        .unwrap_or(1.0);
    Ok(r.lr0 * factor)
}
