//! Mask overlap scoring against consensus nodules.

use serde::{Deserialize, Serialize};

use super::{EvalError, GroundTruthSet};
use crate::geometry3d::hit_test;
use crate::heads::{Candidate, ScoreField};
use crate::volume_store::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub volume_id: String,
    pub nodule: usize,
    pub n_readers: usize,
    pub iou: f64,
    pub dsc: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    pub per_nodule: Vec<SegScore>,
    pub consensus_filter: usize,
    pub matched_only: bool,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub mean_dsc: f64,
    pub std_dsc: f64,
}

/// `(IoU, DSC)` of two masks; both 0 when the union is empty.
pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> (f64, f64) {
    let inter = pred.intersection_count(gt) as f64;
    let (p, g) = (pred.count() as f64, gt.count() as f64);
    if p + g == 0.0 {
        return (0.0, 0.0);
    }
    (inter / (p + g - inter), 2.0 * inter / (p + g))
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores every nodule read by at least `consensus_filter` readers. Each
/// nodule takes the mask of the best-ranked candidate (by `field`, falling
/// back to the screening score) whose center hits it. Unmatched nodules
/// score 0 unless `matched_only`, which leaves them out.
pub fn seg_scores(
    candidates: &[Candidate],
    gts: &GroundTruthSet,
    consensus_filter: usize,
    matched_only: bool,
    field: ScoreField,
) -> Result<SegScores, EvalError> {
    if !(1..=4).contains(&consensus_filter) {
        return Err(EvalError::InvalidFilter(consensus_filter));
    }
    for c in candidates {
        if !gts.contains_key(&c.volume_id) {
            return Err(EvalError::UnknownVolume(c.volume_id.clone()));
        }
    }
    let mut per_nodule = Vec::new();
    let mut considered = 0;
    for (id, nodules) in gts {
        for (k, g) in nodules.iter().enumerate() {
            if g.n_readers < consensus_filter {
                continue;
            }
            considered += 1;
            let best = candidates
                .iter()
                .filter(|c| &c.volume_id == id && c.mask.is_some() && hit_test(c.bbox.center, g))
                .max_by(|a, b| {
                    let s = |c: &Candidate| c.score(field).unwrap_or(c.p_ncs);
                    s(a).total_cmp(&s(b))
                });
            let (iou, dsc, matched) = match best.and_then(|c| c.mask.as_ref()) {
                Some(m) => {
                    let (i, d) = overlap(m, &g.consensus_mask);
                    (i, d, true)
                }
                None => (0.0, 0.0, false),
            };
            if matched || !matched_only {
                per_nodule.push(SegScore {
                    volume_id: id.clone(),
                    nodule: k,
                    n_readers: g.n_readers,
                    iou,
                    dsc,
                    matched,
                });
            }
        }
    }
    if considered == 0 {
        return Err(EvalError::EmptyGroundTruth { consensus_filter });
    }
    let (mean_iou, std_iou, mean_dsc, std_dsc) = if per_nodule.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let (mi, si) = mean_std(per_nodule.iter().map(|s| s.iou));
        let (md, sd) = mean_std(per_nodule.iter().map(|s| s.dsc));
        (mi, si, md, sd)
    };
    Ok(SegScores {
        per_nodule,
        consensus_filter,
        matched_only,
        mean_iou,
        std_iou,
        mean_dsc,
        std_dsc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry3d::Box3D;
    use crate::volume_store::{render_ellipsoid, GroundTruthNodule};

    fn block(origin: [usize; 3], dims: [usize; 3]) -> BinaryMask {
        BinaryMask::from_bits(origin, dims, vec![true; dims.iter().product()])
    }

    #[test]
    fn overlap_examples() {
        let g = block([0; 3], [2, 2, 2]);
        assert_eq!(overlap(&g, &g), (1.0, 1.0));
        let p = block([0; 3], [1, 2, 2]);
        let (i, d) = overlap(&p, &g);
        assert_eq!(i, 0.5);
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap(&block([5; 3], [2, 2, 2]), &g), (0.0, 0.0));
    }

    #[test]
    fn filter_matching_and_unmatched_zero() {
        let m4 = render_ellipsoid([32; 3], [8.5; 3], [3.0; 3]);
        let m3 = render_ellipsoid([32; 3], [22.5; 3], [3.0; 3]);
        let gts: GroundTruthSet = [(
            "v".to_string(),
            vec![GroundTruthNodule::from_mask(&m4, 4).unwrap(), GroundTruthNodule::from_mask(&m3, 3).unwrap()],
        )]
        .into();
        let c = Candidate {
            volume_id: "v".into(),
            bbox: Box3D::cube([8.5; 3], 6.0),
            p_ncs: 0.7,
            p_fpr: None,
            p_fu: None,
            mask: Some(m4.clone()),
        };
        let all = seg_scores(&[c.clone()], &gts, 3, false, ScoreField::Fu).unwrap();
        assert_eq!(all.per_nodule.len(), 2);
        assert_eq!(all.mean_dsc, 0.5);
        let only = seg_scores(&[c.clone()], &gts, 3, true, ScoreField::Fu).unwrap();
        assert_eq!(only.per_nodule.len(), 1);
        assert_eq!(only.mean_dsc, 1.0);
        let strict = seg_scores(&[c], &gts, 4, false, ScoreField::Fu).unwrap();
        assert_eq!(strict.per_nodule.len(), 1);
        assert_eq!(strict.mean_iou, 1.0);
        let empty: GroundTruthSet = [("v".to_string(), vec![GroundTruthNodule::from_mask(&m3, 3).unwrap()])].into();
        assert!(matches!(seg_scores(&[], &empty, 4, false, ScoreField::Fu), Err(EvalError::EmptyGroundTruth { .. })));
    }
}
