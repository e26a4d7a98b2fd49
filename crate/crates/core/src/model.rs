//! The full detector: backbone plus the heads enabled by the variant.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_backbone, receptive_field, Backbone, BackboneConfig, BackboneError, Endpoint, FeatureEndpoints};
use crate::geometry3d::{assign_box_targets, assign_targets, generate_anchors, AnchorGrid, Box3D};
use crate::heads::{
    fpr_loss, fuse_probabilities, ncs_loss, propose, refine, roi_pool, sigmoid, soft_dice_loss, crop_target, Candidate,
    FprHead, FprOutput, HeadsConfig, HeadsError, MaskPrediction, NcsHead, NcsOutput, Proposal, SrCrop, SrHead,
};
use crate::nn::tape::StatUpdate;
use crate::nn::{Mode, NodeId, ParamBuilder, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;
use crate::volume_store::{GroundTruthNodule, Volume};

/// Stride of the map the screening head runs on.
pub const DETECTION_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Which heads are trained: screening only, plus the classifier, plus masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    N1,
    N2,
    N3,
}

/// Map the classifier pools from: the decoder map or the early encoder map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FprFeature {
    Fc,
    #[default]
    Fd,
}

impl FprFeature {
    pub fn endpoint(self) -> Endpoint {
        match self {
            FprFeature::Fc => Endpoint::FeatureMap4,
            FprFeature::Fd => Endpoint::Down4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub fpr_feature: FprFeature,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::N3,
            fpr_feature: FprFeature::Fd,
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
        }
    }
}

/// Field of one pooled classifier sample: the source endpoint's field plus
/// one cell of trilinear support.
pub fn fpr_receptive_field(config: &BackboneConfig, feature: FprFeature) -> usize {
    receptive_field(config, feature.endpoint()) + DETECTION_STRIDE
}

/// Field of a screening logit: the decoder map plus the head's 3³ conv.
pub fn ncs_receptive_field(config: &BackboneConfig) -> usize {
    receptive_field(config, Endpoint::FeatureMap4) + 2 * DETECTION_STRIDE
}

/// Relative weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ncs_cls: f32,
    pub ncs_reg: f32,
    pub fpr_cls: f32,
    pub fpr_reg: f32,
    pub dice: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ncs_cls: 1.0,
            ncs_reg: 1.0,
            fpr_cls: 1.0,
            fpr_reg: 1.0,
            dice: 1.0,
        }
    }
}

/// Loss components of one step; absent heads report `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ncs_cls: f64,
    pub ncs_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

pub struct StepOutput {
    pub losses: LossBreakdown,
    pub grads: HashMap<ParamId, Tensor>,
    pub stat_updates: Vec<StatUpdate>,
}

/// Node ids and side data of one forward pass.
pub struct ForwardPass {
    pub endpoints: FeatureEndpoints,
    pub ncs: NcsOutput,
    pub proposals: Vec<Box3D>,
    pub proposal_scores: Vec<f64>,
    pub pooled: Option<NodeId>,
    pub fpr: Option<FprOutput>,
}

pub struct NoduleNet {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    ncs: NcsHead,
    fpr: Option<FprHead>,
    sr: Option<SrHead>,
}

impl NoduleNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.heads.validate().map_err(ModelError::Config)?;
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let backbone = build_backbone(&config.backbone, &mut b)?;
        let c = config.backbone.feature_channels();
        let ncs = NcsHead::new(&mut b, c, config.heads.anchor_sizes.len());
        let roi = config.heads.roi_size;
        let fpr = (config.variant >= Variant::N2).then(|| FprHead::new(&mut b, c * roi * roi * roi, config.heads.fpr_hidden));
        let widths = [Endpoint::Down1, Endpoint::Down2, Endpoint::FeatureMap4].map(|e| config.backbone.endpoint_channels(e));
        let sr = (config.variant == Variant::N3).then(|| SrHead::new(&mut b, widths));
        Ok(Self {
            config,
            params,
            backbone,
            ncs,
            fpr,
            sr,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn anchor_grid(&self, volume_shape: [usize; 3]) -> AnchorGrid {
        generate_anchors(
            volume_shape.map(|s| s / DETECTION_STRIDE),
            DETECTION_STRIDE,
            &self.config.heads.anchor_sizes,
        )
    }

    pub fn prepare_input(&self, volume: &Volume) -> Result<Tensor, ModelError> {
        Ok(self.backbone.normalize(volume.shape(), volume.voxels())?)
    }

    /// Backbone, screening head and (for N2/N3) the classifier over the
    /// top proposals. With `gt_boxes`, ground-truth boxes join the proposals.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        input: Tensor,
        gt_boxes: Option<&[Box3D]>,
    ) -> Result<ForwardPass, ModelError> {
        let shape = input.spatial();
        let x = tape.input(input);
        let endpoints = self.backbone.forward(tape, x)?;
        let ncs = self.ncs.forward(tape, endpoints.feature_map_4)?;
        let h = &self.config.heads;
        let mut pass = ForwardPass {
            endpoints,
            ncs,
            proposals: Vec::new(),
            proposal_scores: Vec::new(),
            pooled: None,
            fpr: None,
        };
        let post = if gt_boxes.is_some() { h.proposals_train } else { h.proposals_test };
        let grid = self.anchor_grid(shape);
        let props: Vec<Proposal> = propose(tape.value(ncs.logits), tape.value(ncs.deltas), &grid, shape, h, post);
        pass.proposal_scores = props.iter().map(Proposal::probability).collect();
        pass.proposals = props.iter().map(|p| p.bbox).collect();
        if let Some(head) = &self.fpr {
            let mut boxes = pass.proposals.clone();
            if let Some(gts) = gt_boxes {
                boxes.extend(gts.iter().filter_map(|b| b.clip(shape)));
            }
            if !boxes.is_empty() {
                let source = endpoints.get(self.config.fpr_feature.endpoint());
                let pooled = roi_pool(tape, source, DETECTION_STRIDE, &boxes, h.roi_size)?;
                pass.pooled = Some(pooled);
                pass.fpr = Some(head.forward(tape, pooled)?);
            }
            pass.proposals = boxes;
        }
        Ok(pass)
    }

    /// Forward pass, all enabled losses and their parameter gradients.
    pub fn train_step<R: Rng>(
        &self,
        input: Tensor,
        gts: &[GroundTruthNodule],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<StepOutput, ModelError> {
        let shape = input.spatial();
        let h = &self.config.heads;
        let gt_boxes: Vec<Box3D> = gts.iter().map(|g| g.bbox).collect();
        let mut tape = Tape::new(&self.params, Mode::Train);
        let pass = self.forward(&mut tape, input, Some(&gt_boxes))?;
        let mut seeds = Vec::new();
        let mut losses = LossBreakdown::default();

        let grid = self.anchor_grid(shape);
        let targets = assign_targets(&grid, &gt_boxes, h.ncs_pos_iou, h.ncs_neg_iou);
        let ncs = ncs_loss(tape.value(pass.ncs.logits), tape.value(pass.ncs.deltas), &targets, h, rng)?;
        losses.ncs_cls = ncs.loss.cls as f64;
        losses.ncs_reg = ncs.loss.reg as f64;
        seeds.push((pass.ncs.logits, scaled(ncs.d_logits, weights.ncs_cls)));
        seeds.push((pass.ncs.deltas, scaled(ncs.d_deltas, weights.ncs_reg)));
        let mut total = weights.ncs_cls as f64 * losses.ncs_cls + weights.ncs_reg as f64 * losses.ncs_reg;

        if self.fpr.is_some() {
            let (cls, reg) = match pass.fpr {
                Some(out) => {
                    let t = assign_box_targets(&pass.proposals, &gt_boxes, h.fpr_pos_iou, h.fpr_neg_iou);
                    let l = fpr_loss(tape.value(out.logits), tape.value(out.deltas), &t);
                    seeds.push((out.logits, scaled(l.d_logits, weights.fpr_cls)));
                    seeds.push((out.deltas, scaled(l.d_deltas, weights.fpr_reg)));
                    (l.loss.cls as f64, l.loss.reg as f64)
                }
                None => (0.0, 0.0),
            };
            losses.fpr_cls = Some(cls);
            losses.fpr_reg = Some(reg);
            total += weights.fpr_cls as f64 * cls + weights.fpr_reg as f64 * reg;
        }

        if let Some(sr) = &self.sr {
            let mut nodes = Vec::new();
            let mut probs = Vec::new();
            let mut targets = Vec::new();
            for g in gts {
                let crop = SrCrop::around(&g.bbox, h.sr_margin, shape)?;
                let logits = sr.forward(&mut tape, &pass.endpoints, &crop);
                probs.push(tape.value(logits).data().iter().map(|&v| sigmoid(v)).collect::<Vec<f32>>());
                targets.push(crop_target(&g.consensus_mask, &crop));
                nodes.push(logits);
            }
            let p: Vec<&[f32]> = probs.iter().map(Vec::as_slice).collect();
            let t: Vec<&[f32]> = targets.iter().map(Vec::as_slice).collect();
            let dice = soft_dice_loss(&p, &t)?;
            for ((node, d), pr) in nodes.iter().zip(&dice.d_pred).zip(&probs) {
                let g: Vec<f32> = d.iter().zip(pr).map(|(&d, &p)| weights.dice * d * p * (1.0 - p)).collect();
                seeds.push((*node, Tensor::from_vec(tape.value(*node).shape(), g)));
            }
            losses.dice = Some(dice.loss as f64);
            total += weights.dice as f64 * dice.loss as f64;
        }
        losses.total = total;
        let grads = tape.backward(seeds).params;
        let stat_updates = tape.take_stat_updates();
        Ok(StepOutput {
            losses,
            grads,
            stat_updates,
        })
    }

    /// Eval-mode detection on one volume.
    pub fn detect(&self, volume: &Volume) -> Result<Vec<Candidate>, ModelError> {
        let shape = volume.shape();
        let h = &self.config.heads;
        let input = self.prepare_input(volume)?;
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let pass = self.forward(&mut tape, input, None)?;
        let mut out: Vec<Candidate> = pass
            .proposals
            .iter()
            .zip(&pass.proposal_scores)
            .map(|(b, &p)| Candidate {
                volume_id: volume.id.clone(),
                bbox: *b,
                p_ncs: p,
                p_fpr: None,
                p_fu: None,
                mask: None,
            })
            .collect();
        if let Some(fpr) = pass.fpr {
            let refined = refine(&pass.proposals, tape.value(fpr.logits), tape.value(fpr.deltas), h.delta_clip);
            for (c, (p, b)) in out.iter_mut().zip(refined) {
                let p = p.clamp(0.0, 1.0);
                c.p_fpr = Some(p);
                c.p_fu = Some(fuse_probabilities(c.p_ncs, p, h.fusion)?);
                if let Some(b) = b.ok().and_then(|b| b.clip(shape)) {
                    c.bbox = b;
                }
            }
        }
        if let Some(sr) = &self.sr {
            let mut order: Vec<usize> = (0..out.len()).collect();
            let key = |c: &Candidate| c.p_fu.unwrap_or(c.p_ncs);
            order.sort_by(|&a, &b| key(&out[b]).total_cmp(&key(&out[a])).then(a.cmp(&b)));
            for &i in order.iter().take(h.sr_top_n) {
                let Ok(crop) = SrCrop::around(&out[i].bbox, h.sr_margin, shape) else { continue };
                let logits = sr.forward(&mut tape, &pass.endpoints, &crop);
                out[i].mask = Some(MaskPrediction::from_logits(crop, tape.value(logits)).binarize());
            }
        }
        Ok(out)
    }
}

fn scaled(mut t: Tensor, w: f32) -> Tensor {
    if w != 1.0 {
        t.scale(w);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_store::{generate_phantom, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant, feature: FprFeature) -> ModelConfig {
        ModelConfig {
            variant,
            fpr_feature: feature,
            backbone: BackboneConfig {
                base_channels: 2,
                blocks_per_stage: 1,
                ..Default::default()
            },
            heads: HeadsConfig {
                fpr_hidden: 16,
                proposals_train: 8,
                proposals_test: 8,
                ..Default::default()
            },
        }
    }

    fn phantom() -> (Volume, Vec<GroundTruthNodule>) {
        generate_phantom(&PhantomSpec {
            shape: [32; 3],
            n_nodules: 2,
            diameter_range_vox: [5.0, 8.0],
            nodule_intensity: 1.0,
            background_noise_sd: 0.1,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn decoupled_field_is_smaller() {
        let cfg = BackboneConfig::default();
        assert!(fpr_receptive_field(&cfg, FprFeature::Fd) < ncs_receptive_field(&cfg));
        assert!(fpr_receptive_field(&cfg, FprFeature::Fd) < fpr_receptive_field(&cfg, FprFeature::Fc));
    }

    #[test]
    fn variant_gates_loss_components() {
        let (vol, gts) = phantom();
        let w = LossWeights::default();
        for (variant, fpr, dice) in [(Variant::N1, false, false), (Variant::N2, true, false), (Variant::N3, true, true)] {
            let net = NoduleNet::new(small(variant, FprFeature::Fd), 1).unwrap();
            let input = net.prepare_input(&vol).unwrap();
            let out = net.train_step(input, &gts, &w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(out.losses.fpr_cls.is_some(), fpr);
            assert_eq!(out.losses.dice.is_some(), dice);
            assert!(out.losses.total.is_finite() && out.losses.total > 0.0);
            for id in net.params().trainable_ids() {
                assert!(out.grads.contains_key(&id), "{variant:?} missing gradient for {}", net.params().name(id));
            }
            let cands = net.detect(&vol).unwrap();
            assert!(cands.len() <= 8);
            assert!(cands.iter().all(|c| c.p_fu.is_some() == fpr && c.mask.is_some() == dice));
        }
    }

    #[test]
    fn fd_and_fc_differ_only_in_pool_source() {
        let (vol, gts) = phantom();
        let boxes: Vec<Box3D> = gts.iter().map(|g| g.bbox).collect();
        let fc = NoduleNet::new(small(Variant::N2, FprFeature::Fc), 7).unwrap();
        let fd = NoduleNet::new(small(Variant::N2, FprFeature::Fd), 7).unwrap();
        assert_eq!(fc.params().len(), fd.params().len());
        assert!(fc.params().ids().all(|id| fc.params().get(id) == fd.params().get(id)));
        let mut ta = Tape::new(fc.params(), Mode::Train);
        let mut tb = Tape::new(fd.params(), Mode::Train);
        let pa = fc.forward(&mut ta, fc.prepare_input(&vol).unwrap(), Some(&boxes)).unwrap();
        let pb = fd.forward(&mut tb, fd.prepare_input(&vol).unwrap(), Some(&boxes)).unwrap();
        assert_eq!(ta.len(), tb.len());
        let pool = pa.pooled.unwrap();
        assert_eq!(pool, pb.pooled.unwrap());
        for n in 0..ta.len() {
            assert_eq!(ta.op_name(n), tb.op_name(n));
            if n != pool {
                assert_eq!(ta.inputs_of(n), tb.inputs_of(n), "node {n} ({})", ta.op_name(n));
            }
        }
        assert_eq!(ta.inputs_of(pool), vec![pa.endpoints.feature_map_4]);
        assert_eq!(tb.inputs_of(pool), vec![pb.endpoints.down_4]);
    }
}
