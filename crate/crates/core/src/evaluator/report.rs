//! Ablation tables and CSV artifacts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::froc::{FrocCurve, FP_RATES};
use super::seg::SegScores;
use super::EvalError;
use crate::heads::{Candidate, ScoreField};
use crate::model::{FprFeature, Variant};
use crate::volume_store::GroundTruthNodule;

/// An architecture variant of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantKey {
    pub variant: Variant,
    pub fpr_feature: Option<FprFeature>,
    pub rotate: bool,
}

impl VariantKey {
    pub const fn new(variant: Variant, fpr_feature: Option<FprFeature>, rotate: bool) -> Self {
        Self {
            variant,
            fpr_feature,
            rotate,
        }
    }

    /// The six trained architectures, in table order.
    pub const MATRIX: [VariantKey; 6] = [
        VariantKey::new(Variant::N1, None, false),
        VariantKey::new(Variant::N2, Some(FprFeature::Fc), false),
        VariantKey::new(Variant::N3, Some(FprFeature::Fc), false),
        VariantKey::new(Variant::N2, Some(FprFeature::Fd), false),
        VariantKey::new(Variant::N3, Some(FprFeature::Fd), false),
        VariantKey::new(Variant::N3, Some(FprFeature::Fd), true),
    ];

    /// Display name such as `N3 + Fd + R`.
    pub fn label(&self) -> String {
        let mut s = format!("{:?}", self.variant);
        if let Some(f) = self.fpr_feature {
            s.push_str(&format!(" + {f:?}"));
        }
        if self.rotate {
            s.push_str(" + R");
        }
        s
    }

    /// Directory-safe name such as `N3_Fd_R`.
    pub fn slug(&self) -> String {
        self.label().replace(" + ", "_")
    }
}

/// Rows of the ablation table, in order: each variant with the score fields
/// it reports.
pub const TABLE_ROWS: [(VariantKey, ScoreField); 13] = {
    use ScoreField::*;
    let m = VariantKey::MATRIX;
    [
        (m[0], Ncs),
        (m[1], Ncs),
        (m[1], Fpr),
        (m[2], Ncs),
        (m[2], Fpr),
        (m[3], Ncs),
        (m[3], Fpr),
        (m[4], Ncs),
        (m[4], Fpr),
        (m[4], Fu),
        (m[5], Ncs),
        (m[5], Fpr),
        (m[5], Fu),
    ]
};

pub fn row_label(key: &VariantKey, field: ScoreField) -> String {
    format!("{} ({})", key.label(), field.name().to_uppercase())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub sensitivities: [f64; 7],
    pub cpm: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
}

/// Table rows for the results present, in table order.
pub fn ablation_report(results: &[(VariantKey, ScoreField, FrocCurve)]) -> AblationReport {
    let rows = TABLE_ROWS
        .iter()
        .filter_map(|(k, f)| {
            results.iter().find(|(rk, rf, _)| rk == k && rf == f).map(|(_, _, c)| ReportRow {
                method: row_label(k, *f),
                sensitivities: c.sensitivities,
                cpm: c.cpm,
            })
        })
        .collect();
    AblationReport { rows }
}

const HEADER: &str = "method,0.125,0.25,0.5,1.0,2.0,4.0,8.0,avg";

impl AblationReport {
    /// Percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.method);
            for v in r.sensitivities.iter().chain([&r.cpm]) {
                let _ = write!(s, ",{:.2}", 100.0 * v);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => {
                return Err(EvalError::Csv {
                    line: 1,
                    message: format!("expected header {HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Csv { line: i + 1, message };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 9 {
                return Err(err(format!("expected 9 cells, got {}", cells.len())));
            }
            let mut vals = [0.0; 8];
            for (v, c) in vals.iter_mut().zip(&cells[1..]) {
                *v = c.parse::<f64>().map_err(|e| err(format!("{c:?}: {e}")))? / 100.0;
            }
            rows.push(ReportRow {
                method: cells[0].to_string(),
                sensitivities: vals[..7].try_into().expect("seven values"),
                cpm: vals[7],
            });
        }
        Ok(Self { rows })
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}", "Method");
        for r in FP_RATES {
            let _ = write!(s, " {:>6}", r);
        }
        s.push_str("    Avg\n");
        for r in &self.rows {
            let _ = write!(s, "{:<w$}", r.method);
            for v in r.sensitivities {
                let _ = write!(s, " {:>6.2}", 100.0 * v);
            }
            let _ = writeln!(s, " {:>6.2}", 100.0 * r.cpm);
        }
        s
    }
}

/// Raw operating points of one curve.
pub fn froc_points_csv(curve: &FrocCurve) -> String {
    let mut s = String::from("threshold,false_positives,fp_per_scan,detected,sensitivity\n");
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.threshold, p.false_positives, p.fp_per_scan, p.detected, p.sensitivity
        );
    }
    s
}

pub fn seg_scores_csv(scores: &SegScores) -> String {
    let mut s = String::from("volume_id,nodule,n_readers,matched,iou,dsc\n");
    for r in &scores.per_nodule {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.volume_id, r.nodule, r.n_readers, r.matched, r.iou, r.dsc);
    }
    let _ = writeln!(
        s,
        "# consensus>={} matched_only={} iou {:.4}±{:.4} dsc {:.4}±{:.4}",
        scores.consensus_filter, scores.matched_only, scores.mean_iou, scores.std_iou, scores.mean_dsc, scores.std_dsc
    );
    s
}

/// Binary PGM of each nodule's central slice: ground truth on the left,
/// the best-matching predicted mask on the right, one row per nodule.
pub fn render_montage(pairs: &[(&GroundTruthNodule, Option<&Candidate>)], tile: usize) -> Vec<u8> {
    let (w, h) = (2 * tile + 1, pairs.len().max(1) * (tile + 1));
    let mut img = vec![0u8; w * h];
    for (row, (g, c)) in pairs.iter().enumerate() {
        let z = g.center_vox[0].floor() as usize;
        let cy = g.center_vox[1] as isize - tile as isize / 2;
        let cx = g.center_vox[2] as isize - tile as isize / 2;
        for ty in 0..tile {
            for tx in 0..tile {
                let (y, x) = (cy + ty as isize, cx + tx as isize);
                if y < 0 || x < 0 {
                    continue;
                }
                let v = [z, y as usize, x as usize];
                let py = row * (tile + 1) + ty;
                if g.consensus_mask.get(v) {
                    img[py * w + tx] = 255;
                }
                if c.and_then(|c| c.mask.as_ref()).is_some_and(|m| m.get(v)) {
                    img[py * w + tile + 1 + tx] = 255;
                }
            }
        }
        for py in row * (tile + 1)..row * (tile + 1) + tile {
            img[py * w + tile] = 128;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(s: [f64; 7]) -> FrocCurve {
        FrocCurve {
            points: vec![],
            sensitivities: s,
            cpm: s.iter().sum::<f64>() / 7.0,
            n_scans: 1,
            n_nodules: 1,
        }
    }

    #[test]
    fn rows_follow_table_order_and_round_trip() {
        let m = VariantKey::MATRIX;
        let results = vec![
            (m[5], ScoreField::Fu, curve([0.7082, 0.7834, 0.8568, 0.9001, 0.9425, 0.9549, 0.9629])),
            (m[0], ScoreField::Ncs, curve([0.5217, 0.6251, 0.7109, 0.8046, 0.8727, 0.9107, 0.9443])),
            (m[1], ScoreField::Fu, curve([0.5; 7])),
        ];
        let r = ablation_report(&results);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].method, "N1 (NCS)");
        assert_eq!(r.rows[1].method, "N3 + Fd + R (FU)");
        let csv = r.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "N1 (NCS),52.17,62.51,71.09,80.46,87.27,91.07,94.43,77.00");
        assert!(csv.lines().nth(2).unwrap().ends_with(",87.27"));
        assert_eq!(AblationReport::from_csv(&csv).unwrap().to_csv(), csv);
        assert!(AblationReport::from_csv("nope\n").is_err());
        assert!(r.to_table().contains("N3 + Fd + R (FU)"));
        assert_eq!(m[5].slug(), "N3_Fd_R");
    }

    #[test]
    fn montage_header() {
        let img = render_montage(&[], 8);
        assert!(img.starts_with(b"P5\n17 9\n255\n"));
    }
}
