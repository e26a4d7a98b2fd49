//! Second-stage classifier and box refinement over ROI-pooled features.

use super::losses::{detection_loss, sigmoid, DetectionLoss};
use super::HeadsError;
use crate::geometry3d::{decode, AnchorLabel, Box3D, GeometryError, RegressionDelta, TargetAssignment};
use crate::nn::layers::Linear;
use crate::nn::{NodeId, ParamBuilder, Tape};
use crate::tensor::Tensor;

/// Converts volume-space boxes to feature-cell bounds and pools `out³`
/// trilinear samples per box. Result is `[n, C·out³]`.
pub fn roi_pool(tape: &mut Tape<'_>, feature: NodeId, stride: usize, boxes: &[Box3D], out: usize) -> Result<NodeId, HeadsError> {
    let spatial = tape.value(feature).spatial();
    let extent = spatial.map(|s| s * stride);
    let s = stride as f64;
    let mut cell_boxes = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let clipped = b.clip(extent).ok_or(HeadsError::DegenerateBox { index: i, bbox: *b })?;
        let (lo, hi) = (clipped.lo(), clipped.hi());
        cell_boxes.push([0, 1, 2, 3, 4, 5].map(|j| if j < 3 { (lo[j] / s) as f32 } else { (hi[j - 3] / s) as f32 }));
    }
    Ok(tape.roi_align(feature, cell_boxes, out))
}

#[derive(Clone, Debug)]
pub struct FprHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

/// `logits` is `[n, 1]`, `deltas` is `[n, 6]`.
#[derive(Clone, Copy, Debug)]
pub struct FprOutput {
    pub logits: NodeId,
    pub deltas: NodeId,
}

impl FprHead {
    pub fn new(b: &mut ParamBuilder<'_>, in_features: usize, hidden: usize) -> Self {
        b.scope("fpr", |b| Self {
            fc1: Linear::new(b, "fc1", in_features, hidden),
            fc2: Linear::new(b, "fc2", hidden, hidden),
            cls: Linear::with_std(b, "cls", hidden, 1, 0.01),
            reg: Linear::with_std(b, "reg", hidden, 6, 0.001),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, pooled: NodeId) -> Result<FprOutput, HeadsError> {
        let width = tape.value(pooled).shape()[1];
        if width != self.fc1.fin {
            return Err(HeadsError::ChannelMismatch {
                expected: self.fc1.fin,
                got: width,
            });
        }
        let h = self.fc1.forward(tape, pooled);
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h);
        let h = tape.relu(h);
        Ok(FprOutput {
            logits: self.cls.forward(tape, h),
            deltas: self.reg.forward(tape, h),
        })
    }
}

/// Per-proposal probability and refined box.
pub fn refine(proposals: &[Box3D], logits: &Tensor, deltas: &Tensor, delta_clip: f64) -> Vec<(f64, Result<Box3D, GeometryError>)> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = [0, 1, 2, 3, 4, 5].map(|j| deltas.data()[i * 6 + j] as f64);
            for v in &mut d[3..] {
                *v = v.clamp(-delta_clip, delta_clip);
            }
            (sigmoid(logits.data()[i] as f64), decode(p, &RegressionDelta(d)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FprLoss {
    pub loss: DetectionLoss<f32>,
    pub d_logits: Tensor,
    pub d_deltas: Tensor,
}

/// Same objective as the screening loss, over every non-ignored proposal.
pub fn fpr_loss(logits: &Tensor, deltas: &Tensor, targets: &TargetAssignment) -> FprLoss {
    let n = targets.labels.len();
    assert_eq!(logits.len(), n, "one logit per proposal");
    let sampled: Vec<usize> = (0..n).filter(|&i| targets.labels[i] != AnchorLabel::Ignore).collect();
    let pos: Vec<usize> = targets.positives().collect();
    let x: Vec<f32> = sampled.iter().map(|&i| logits.data()[i]).collect();
    let y: Vec<f32> = sampled
        .iter()
        .map(|&i| if targets.labels[i] == AnchorLabel::Positive { 1.0 } else { 0.0 })
        .collect();
    let pred: Vec<[f32; 6]> = pos.iter().map(|&i| [0, 1, 2, 3, 4, 5].map(|j| deltas.data()[i * 6 + j])).collect();
    let target: Vec<[f32; 6]> = pos
        .iter()
        .map(|&i| targets.deltas[i].expect("positives carry targets").0.map(|v| v as f32))
        .collect();
    let loss = detection_loss(&x, &y, &pred, &target);
    let mut d_logits = Tensor::zeros(logits.shape());
    for (&i, &g) in sampled.iter().zip(&loss.d_logits) {
        d_logits.data_mut()[i] = g;
    }
    let mut d_deltas = Tensor::zeros(deltas.shape());
    for (&i, g) in pos.iter().zip(&loss.d_deltas) {
        d_deltas.data_mut()[i * 6..i * 6 + 6].copy_from_slice(g);
    }
    FprLoss {
        loss,
        d_logits,
        d_deltas,
    }
}
