//! Task heads on top of the backbone: candidate screening, false-positive
//! reduction and segmentation refinement, plus their losses.

mod candidate;
mod fpr;
pub mod losses;
mod ncs;
mod sr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::Box3D;

pub use candidate::{read_candidates, write_candidates, Candidate, CandidateRecord, ScoreField};
pub use fpr::{fpr_loss, refine, roi_pool, FprHead, FprLoss, FprOutput};
pub use losses::{bce_with_logits, detection_loss, sigmoid, smooth_l1, soft_dice_loss, DetectionLoss, DiceLoss};
pub use ncs::{decode_all, ncs_loss, propose, NcsHead, NcsLoss, NcsOutput, Proposal};
pub use sr::{crop_target, MaskPrediction, SrCrop, SrHead, CROP_ALIGN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadsError {
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("box {index} ({bbox:?}) has zero volume after clipping")]
    DegenerateBox { index: usize, bbox: Box3D },
    #[error("crop around {bbox:?} is empty")]
    EmptyCrop { bbox: Box3D },
    #[error("{pred} predicted masks for {gt} targets")]
    PairCount { pred: usize, gt: usize },
    #[error("mask pair {pair}: prediction has {pred} voxels, target {gt}")]
    MaskShapeMismatch { pair: usize, pred: usize, gt: usize },
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("unknown score field {0:?}")]
    UnknownScoreField(String),
    #[error("candidate dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for HeadsError {
    fn from(e: std::io::Error) -> Self {
        HeadsError::Io(e.to_string())
    }
}

/// How screening and classifier probabilities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    #[default]
    Mean,
    Geometric,
    Max,
}

pub fn fuse_probabilities(p_ncs: f64, p_fpr: f64, rule: FusionRule) -> Result<f64, HeadsError> {
    for p in [p_ncs, p_fpr] {
        if !(0.0..=1.0).contains(&p) {
            return Err(HeadsError::ProbabilityOutOfRange(p));
        }
    }
    Ok(match rule {
        FusionRule::Mean => 0.5 * (p_ncs + p_fpr),
        FusionRule::Geometric => (p_ncs * p_fpr).sqrt(),
        FusionRule::Max => p_ncs.max(p_fpr),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    /// Cube anchor edge lengths in voxels.
    pub anchor_sizes: Vec<f64>,
    pub ncs_pos_iou: f64,
    pub ncs_neg_iou: f64,
    pub ncs_pos_samples: usize,
    pub ncs_neg_samples: usize,
    pub pre_nms_top_n: usize,
    pub nms_iou: f64,
    pub proposals_train: usize,
    pub proposals_test: usize,
    /// Bound on the log-size deltas before decoding.
    pub delta_clip: f64,
    pub fpr_pos_iou: f64,
    pub fpr_neg_iou: f64,
    pub roi_size: usize,
    pub fpr_hidden: usize,
    pub sr_margin: f64,
    /// Detections per volume that receive a predicted mask at inference.
    pub sr_top_n: usize,
    pub fusion: FusionRule,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            anchor_sizes: vec![5.0, 10.0, 20.0, 30.0, 50.0],
            ncs_pos_iou: 0.5,
            ncs_neg_iou: 0.02,
            ncs_pos_samples: 32,
            ncs_neg_samples: 64,
            pre_nms_top_n: 1000,
            nms_iou: 0.1,
            proposals_train: 128,
            proposals_test: 64,
            delta_clip: 4.0,
            fpr_pos_iou: 0.5,
            fpr_neg_iou: 0.1,
            roi_size: 6,
            fpr_hidden: 512,
            sr_margin: 4.0,
            sr_top_n: 16,
            fusion: FusionRule::Mean,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err("anchor_sizes must be a nonempty list of positive sizes".into());
        }
        for (name, lo, hi) in [
            ("ncs_neg_iou/ncs_pos_iou", self.ncs_neg_iou, self.ncs_pos_iou),
            ("fpr_neg_iou/fpr_pos_iou", self.fpr_neg_iou, self.fpr_pos_iou),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(format!("{name} must satisfy 0 <= neg <= pos <= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err("nms_iou must lie in [0, 1]".into());
        }
        if self.roi_size == 0 || self.fpr_hidden == 0 || self.pre_nms_top_n == 0 {
            return Err("roi_size, fpr_hidden and pre_nms_top_n must be positive".into());
        }
        if !(self.sr_margin >= 0.0 && self.delta_clip > 0.0) {
            return Err("sr_margin must be >= 0 and delta_clip > 0".into());
        }
        Ok(())
    }
}
