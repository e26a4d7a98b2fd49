//! Continuous 3D box algebra: anchors, IoU, delta encoding, NMS, target
//! assignment and the distance-based hit criterion.
//!
//! Coordinates are continuous voxel units ordered `(z, y, x)`. Voxel `v`
//! occupies `[v, v + 1)` on each axis, so its center sits at `v + 0.5`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume_store::{BinaryMask, GroundTruthNodule};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("regression delta has non-finite component {0:?}")]
    NonFiniteDelta([f64; 6]),
    #[error("box size must be positive and finite, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("{boxes} boxes but {scores} scores")]
    LengthMismatch { boxes: usize, scores: usize },
    #[error("cannot take the bounding box of an empty mask")]
    EmptyMask,
}

/// Axis-aligned box: center `(z, y, x)` and size `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeometryError> {
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidSize(size));
        }
        Ok(Self { center, size })
    }

    pub fn cube(center: [f64; 3], edge: f64) -> Self {
        Self {
            center,
            size: [edge; 3],
        }
    }

    /// Box spanning `lo .. hi` (requires `hi > lo` on every axis).
    pub fn from_bounds(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, GeometryError> {
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let size = [0, 1, 2].map(|a| hi[a] - lo[a]);
        Self::new(center, size)
    }

    pub fn lo(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] - 0.5 * self.size[a])
    }

    pub fn hi(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + 0.5 * self.size[a])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Intersection with `[0, shape)`; `None` if nothing of positive volume remains.
    pub fn clip(&self, shape: [usize; 3]) -> Option<Self> {
        let lo = self.lo();
        let hi = self.hi();
        let lo = [0, 1, 2].map(|a| lo[a].max(0.0));
        let hi = [0, 1, 2].map(|a| hi[a].min(shape[a] as f64));
        Self::from_bounds(lo, hi).ok()
    }

    /// Grows every side by `margin`.
    pub fn expand(&self, margin: f64) -> Self {
        Self {
            center: self.center,
            size: self.size.map(|s| s + 2.0 * margin),
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.lo(), a.hi(), b.lo(), b.hi());
    let mut inter = 1.0;
    for ax in 0..3 {
        let overlap = ahi[ax].min(bhi[ax]) - alo[ax].max(blo[ax]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Cube anchors tiled over a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub sizes: Vec<f64>,
    pub stride: usize,
    pub grid_shape: [usize; 3],
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.grid_shape.iter().product::<usize>() * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_sizes(&self) -> usize {
        self.sizes.len()
    }

    /// Anchor index of `(cell, size_index)`; cells are z-major, sizes innermost.
    pub fn index(&self, cell: [usize; 3], size_index: usize) -> usize {
        let [_, h, w] = self.grid_shape;
        ((cell[0] * h + cell[1]) * w + cell[2]) * self.sizes.len() + size_index
    }

    /// Inverse of [`AnchorGrid::index`].
    pub fn cell_of(&self, index: usize) -> ([usize; 3], usize) {
        let k = self.sizes.len();
        let [_, h, w] = self.grid_shape;
        let (cell, s) = (index / k, index % k);
        ([cell / (h * w), (cell / w) % h, cell % w], s)
    }

    pub fn anchor(&self, index: usize) -> Box3D {
        let (cell, s) = self.cell_of(index);
        let st = self.stride as f64;
        Box3D::cube(cell.map(|c| (c as f64 + 0.5) * st), self.sizes[s])
    }

    pub fn iter(&self) -> impl Iterator<Item = Box3D> + '_ {
        (0..self.len()).map(|i| self.anchor(i))
    }
}

/// Anchors for every `(cell, size)` pair; cell `(i,j,k)` is centered at
/// `((i+0.5)·stride, (j+0.5)·stride, (k+0.5)·stride)`.
pub fn generate_anchors(grid_shape: [usize; 3], stride: usize, sizes: &[f64]) -> AnchorGrid {
    assert!(stride >= 1, "stride must be at least 1");
    assert!(!sizes.is_empty(), "at least one anchor size is required");
    AnchorGrid {
        sizes: sizes.to_vec(),
        stride,
        grid_shape,
    }
}

/// Six-term box parameterization relative to an anchor:
/// `(tz, ty, tx)` center offsets over anchor size, `(td, th, tw)` log size ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDelta(pub [f64; 6]);

impl RegressionDelta {
    pub const ZERO: Self = Self([0.0; 6]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn encode(gt: &Box3D, anchor: &Box3D) -> RegressionDelta {
    let mut t = [0.0; 6];
    for a in 0..3 {
        t[a] = (gt.center[a] - anchor.center[a]) / anchor.size[a];
        t[a + 3] = (gt.size[a] / anchor.size[a]).ln();
    }
    RegressionDelta(t)
}

pub fn decode(anchor: &Box3D, delta: &RegressionDelta) -> Result<Box3D, GeometryError> {
    if !delta.is_finite() {
        return Err(GeometryError::NonFiniteDelta(delta.0));
    }
    let t = delta.0;
    let center = [0, 1, 2].map(|a| anchor.center[a] + t[a] * anchor.size[a]);
    let size = [0, 1, 2].map(|a| anchor.size[a] * t[a + 3].exp());
    Box3D::new(center, size)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties by lower index); a box is
/// dropped when its IoU with an already kept box exceeds `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::LengthMismatch {
            boxes: boxes.len(),
            scores: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    /// Regression target for positives.
    pub deltas: Vec<Option<RegressionDelta>>,
    /// Best IoU of each anchor against any ground truth.
    pub max_iou: Vec<f64>,
}

impl TargetAssignment {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(i, _)| i)
    }
}

/// Labels anchors against ground-truth boxes.
pub fn assign_targets(anchors: &AnchorGrid, gts: &[Box3D], pos_iou: f64, neg_iou: f64) -> TargetAssignment {
    let boxes: Vec<Box3D> = anchors.iter().collect();
    assign_box_targets(&boxes, gts, pos_iou, neg_iou)
}

/// [`assign_targets`] over an arbitrary list of reference boxes.
///
/// A box is positive when its best IoU reaches `pos_iou` or when it is the
/// best-matching box of some ground truth (ties to the lower index); negative
/// when its best IoU is below `neg_iou`; ignored otherwise. Positives regress
/// toward their highest-IoU ground truth.
pub fn assign_box_targets(boxes: &[Box3D], gts: &[Box3D], pos_iou: f64, neg_iou: f64) -> TargetAssignment {
    assert!(
        (0.0..=1.0).contains(&neg_iou) && neg_iou <= pos_iou && pos_iou <= 1.0,
        "need 0 <= neg_iou <= pos_iou <= 1"
    );
    let n = boxes.len();
    let mut max_iou = vec![0.0f64; n];
    let mut argmax: Vec<Option<usize>> = vec![None; n];
    let mut best_for_gt: Vec<(f64, usize)> = vec![(-1.0, 0); gts.len()];
    for (i, b) in boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(b, gt);
            if argmax[i].is_none() || v > max_iou[i] {
                max_iou[i] = v;
                argmax[i] = Some(g);
            }
            if v > best_for_gt[g].0 {
                best_for_gt[g] = (v, i);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = max_iou
        .iter()
        .map(|&m| {
            if !gts.is_empty() && m >= pos_iou {
                AnchorLabel::Positive
            } else if m < neg_iou || gts.is_empty() {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    if n > 0 {
        for &(_, i) in &best_for_gt {
            labels[i] = AnchorLabel::Positive;
        }
    }
    let matched: Vec<Option<usize>> = labels
        .iter()
        .zip(&argmax)
        .map(|(l, g)| if *l == AnchorLabel::Positive { *g } else { None })
        .collect();
    let deltas = matched
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(|g| encode(&gts[g], &boxes[i])))
        .collect();
    TargetAssignment {
        labels,
        matched,
        deltas,
        max_iou,
    }
}

/// Distance criterion: the candidate center lies within the nodule radius
/// (boundary inclusive).
pub fn hit_test(candidate_center: [f64; 3], gt: &GroundTruthNodule) -> bool {
    within_radius(candidate_center, gt.center_vox, gt.diameter_vox)
}

pub fn within_radius(point: [f64; 3], center: [f64; 3], diameter: f64) -> bool {
    let d2: f64 = (0..3).map(|a| (point[a] - center[a]).powi(2)).sum();
    d2.sqrt() <= diameter / 2.0
}

/// Tight half-open bounding box of a nonempty mask.
pub fn mask_to_box(mask: &BinaryMask) -> Result<Box3D, GeometryError> {
    let (lo, hi) = mask.bounds().ok_or(GeometryError::EmptyMask)?;
    Box3D::from_bounds(lo.map(|v| v as f64), hi.map(|v| v as f64))
}
