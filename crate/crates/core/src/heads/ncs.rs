//! Candidate screening head: per-anchor objectness and box deltas on the
//! stride-4 decoder map.

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{detection_loss, sigmoid, DetectionLoss};
use super::{HeadsConfig, HeadsError};
use crate::geometry3d::{decode, nms, AnchorGrid, AnchorLabel, Box3D, RegressionDelta, TargetAssignment};
use crate::nn::layers::Conv3d;
use crate::nn::{NodeId, ParamBuilder, Tape};
use crate::tensor::Tensor;

/// Prior probability used to initialize the objectness bias.
const PRIOR_PROBABILITY: f32 = 0.01;

#[derive(Clone, Debug)]
pub struct NcsHead {
    conv: Conv3d,
    cls: Conv3d,
    reg: Conv3d,
    num_anchors: usize,
}

/// Logits `[k, D, H, W]` and deltas `[6k, D, H, W]`, where delta channel
/// `6a + j` holds term `j` of anchor size `a`.
#[derive(Clone, Copy, Debug)]
pub struct NcsOutput {
    pub logits: NodeId,
    pub deltas: NodeId,
}

impl NcsHead {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize, num_anchors: usize) -> Self {
        b.scope("ncs", |b| {
            let bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
            Self {
                conv: Conv3d::new(b, "conv", channels, channels, 3, 1, 1, true),
                cls: Conv3d::head(b, "cls", channels, num_anchors, 0.01, bias),
                reg: Conv3d::head(b, "reg", channels, 6 * num_anchors, 0.001, 0.0),
                num_anchors,
            }
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn forward(&self, tape: &mut Tape<'_>, feature_map: NodeId) -> Result<NcsOutput, HeadsError> {
        let c = tape.value(feature_map).shape()[0];
        if c != self.conv.cin {
            return Err(HeadsError::ChannelMismatch {
                expected: self.conv.cin,
                got: c,
            });
        }
        let h = self.conv.forward(tape, feature_map);
        let h = tape.relu(h);
        Ok(NcsOutput {
            logits: self.cls.forward(tape, h),
            deltas: self.reg.forward(tape, h),
        })
    }
}

/// Logit of anchor `i` (cell-major, sizes innermost).
fn anchor_logit(logits: &[f32], cells: usize, k: usize, i: usize) -> f32 {
    logits[(i % k) * cells + i / k]
}

fn anchor_delta(deltas: &[f32], cells: usize, k: usize, i: usize) -> [f32; 6] {
    let (cell, a) = (i / k, i % k);
    [0, 1, 2, 3, 4, 5].map(|j| deltas[(6 * a + j) * cells + cell])
}

/// Decoded box candidate from the screening head.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub logit: f32,
    pub anchor: usize,
}

impl Proposal {
    pub fn probability(&self) -> f64 {
        sigmoid(self.logit as f64)
    }
}

/// Decodes every anchor to a box in volume coordinates, unfiltered.
pub fn decode_all(logits: &Tensor, deltas: &Tensor, grid: &AnchorGrid, delta_clip: f64) -> Vec<Proposal> {
    let k = grid.num_sizes();
    let cells = logits.len() / k;
    (0..grid.len())
        .filter_map(|i| {
            let d = anchor_delta(deltas.data(), cells, k, i);
            let d = RegressionDelta(d.map(|v| v as f64));
            let bbox = decode(&grid.anchor(i), &clip_delta(d, delta_clip)).ok()?;
            Some(Proposal {
                bbox,
                logit: anchor_logit(logits.data(), cells, k, i),
                anchor: i,
            })
        })
        .collect()
}

fn clip_delta(mut d: RegressionDelta, clip: f64) -> RegressionDelta {
    for v in &mut d.0[3..] {
        *v = v.clamp(-clip, clip);
    }
    d
}

/// Top-scoring decoded boxes, clipped to the volume, NMS-filtered and
/// truncated to `post_nms`.
pub fn propose(
    logits: &Tensor,
    deltas: &Tensor,
    grid: &AnchorGrid,
    volume_shape: [usize; 3],
    config: &HeadsConfig,
    post_nms: usize,
) -> Vec<Proposal> {
    let mut all = decode_all(logits, deltas, grid, config.delta_clip);
    all.sort_by(|a, b| b.logit.total_cmp(&a.logit).then(a.anchor.cmp(&b.anchor)));
    let mut pre: Vec<Proposal> = Vec::with_capacity(config.pre_nms_top_n);
    for mut p in all {
        if pre.len() >= config.pre_nms_top_n {
            break;
        }
        if let Some(b) = p.bbox.clip(volume_shape) {
            if b.size.iter().all(|&s| s >= 1.0) {
                p.bbox = b;
                pre.push(p);
            }
        }
    }
    let boxes: Vec<Box3D> = pre.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = pre.iter().map(|p| p.logit as f64).collect();
    let keep = nms(&boxes, &scores, config.nms_iou).expect("lengths agree");
    keep.into_iter().take(post_nms).map(|i| pre[i].clone()).collect()
}

/// Screening loss together with seed gradients for the head outputs.
#[derive(Clone, Debug)]
pub struct NcsLoss {
    pub loss: DetectionLoss<f32>,
    pub d_logits: Tensor,
    pub d_deltas: Tensor,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Samples up to `ncs_pos_samples` random positives and the
/// `ncs_neg_samples` highest-scoring negatives, then applies
/// [`detection_loss`].
pub fn ncs_loss<R: Rng>(
    logits: &Tensor,
    deltas: &Tensor,
    targets: &TargetAssignment,
    config: &HeadsConfig,
    rng: &mut R,
) -> Result<NcsLoss, HeadsError> {
    let k = config.anchor_sizes.len();
    let cells = logits.len() / k;
    if logits.len() != targets.labels.len() || deltas.len() != 6 * logits.len() {
        return Err(HeadsError::ChannelMismatch {
            expected: targets.labels.len(),
            got: logits.len(),
        });
    }
    let mut pos: Vec<usize> = targets.positives().collect();
    pos.shuffle(rng);
    pos.truncate(config.ncs_pos_samples);
    pos.sort_unstable();
    let mut neg: Vec<usize> = targets.negatives().collect();
    let by_logit = |a: &usize, b: &usize| {
        anchor_logit(logits.data(), cells, k, *b)
            .total_cmp(&anchor_logit(logits.data(), cells, k, *a))
            .then(a.cmp(b))
    };
    if neg.len() > config.ncs_neg_samples {
        neg.select_nth_unstable_by(config.ncs_neg_samples, by_logit);
        neg.truncate(config.ncs_neg_samples);
    }
    neg.sort_unstable();

    let sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let x: Vec<f32> = sampled.iter().map(|&i| anchor_logit(logits.data(), cells, k, i)).collect();
    let y: Vec<f32> = sampled
        .iter()
        .map(|&i| if targets.labels[i] == AnchorLabel::Positive { 1.0 } else { 0.0 })
        .collect();
    let pred: Vec<[f32; 6]> = pos.iter().map(|&i| anchor_delta(deltas.data(), cells, k, i)).collect();
    let target: Vec<[f32; 6]> = pos
        .iter()
        .map(|&i| targets.deltas[i].expect("positives carry targets").0.map(|v| v as f32))
        .collect();
    let loss = detection_loss(&x, &y, &pred, &target);

    let mut d_logits = Tensor::zeros(logits.shape());
    for (&i, &g) in sampled.iter().zip(&loss.d_logits) {
        d_logits.data_mut()[(i % k) * cells + i / k] += g;
    }
    let mut d_deltas = Tensor::zeros(deltas.shape());
    for (&i, g) in pos.iter().zip(&loss.d_deltas) {
        let (cell, a) = (i / k, i % k);
        for j in 0..6 {
            d_deltas.data_mut()[(6 * a + j) * cells + cell] += g[j];
        }
    }
    Ok(NcsLoss {
        loss,
        d_logits,
        d_deltas,
        num_pos: pos.len(),
        num_neg: neg.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry3d::{assign_targets, generate_anchors};
    use crate::nn::{Mode, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shapes_and_zero_weights() {
        let mut store = ParamStore::new();
        let head = NcsHead::new(&mut ParamBuilder::new(&mut store, 1), 8, 5);
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.name(id).to_string();
            if n.starts_with("ncs.cls") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape));
            }
        }
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.input(Tensor::full(&[8, 16, 16, 16], 0.3));
        let out = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[5, 16, 16, 16]);
        assert_eq!(tape.value(out.deltas).shape(), &[30, 16, 16, 16]);
        assert!(tape.value(out.logits).data().iter().all(|&v| sigmoid(v as f64) == 0.5));
        let grid = generate_anchors([16; 3], 4, &[5.0, 10.0, 20.0, 30.0, 50.0]);
        let all = decode_all(tape.value(out.logits), tape.value(out.deltas), &grid, 4.0);
        assert_eq!(all.len(), 5 * 16 * 16 * 16);
        let bad = tape.input(Tensor::zeros(&[4, 8, 8, 8]));
        assert!(matches!(head.forward(&mut tape, bad), Err(HeadsError::ChannelMismatch { .. })));
    }

    #[test]
    fn anchor_layout_matches_grid_index() {
        let grid = generate_anchors([2, 3, 4], 4, &[5.0, 10.0]);
        let cells = 24;
        let logits = Tensor::from_vec(&[2, 2, 3, 4], (0..48).map(|v| v as f32).collect());
        let deltas = Tensor::zeros(&[12, 2, 3, 4]);
        let all = decode_all(&logits, &deltas, &grid, 4.0);
        for p in &all {
            let (cell, s) = grid.cell_of(p.anchor);
            let flat = (cell[0] * 3 + cell[1]) * 4 + cell[2];
            assert_eq!(p.logit, (s * cells + flat) as f32);
            assert_eq!(p.bbox, grid.anchor(p.anchor));
        }
    }

    #[test]
    fn loss_is_sampled_and_scattered() {
        let grid = generate_anchors([4, 4, 4], 4, &[5.0, 10.0]);
        let gt = Box3D::cube([6.0, 6.0, 6.0], 9.0);
        let targets = assign_targets(&grid, &[gt], 0.5, 0.02);
        let cfg = HeadsConfig {
            anchor_sizes: vec![5.0, 10.0],
            ncs_neg_samples: 10,
            ..HeadsConfig::default()
        };
        let logits = Tensor::from_vec(&[2, 4, 4, 4], (0..128).map(|v| (v as f32 * 0.37).sin()).collect());
        let deltas = Tensor::zeros(&[12, 4, 4, 4]);
        let out = ncs_loss(&logits, &deltas, &targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.num_pos >= 1);
        assert_eq!(out.num_neg, 10);
        let touched = out.d_logits.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(touched, out.num_pos + out.num_neg);
        assert!(out.loss.reg > 0.0);
        // the chosen negatives are the highest-logit ones
        let k = 2;
        let mut negs: Vec<f32> = targets.negatives().map(|i| anchor_logit(logits.data(), 64, k, i)).collect();
        negs.sort_by(|a, b| b.total_cmp(a));
        let cutoff = negs[9];
        for i in targets.negatives() {
            let chosen = out.d_logits.data()[(i % k) * 64 + i / k] != 0.0;
            assert_eq!(chosen, anchor_logit(logits.data(), 64, k, i) >= cutoff);
        }
    }
}
