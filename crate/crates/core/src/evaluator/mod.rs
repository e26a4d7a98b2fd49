//! Detection (FROC, CPM) and segmentation (IoU, DSC) scoring, and the
//! report files built from them.

mod froc;
mod report;
mod seg;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::heads::ScoreField;
use crate::volume_store::{GroundTruthNodule, NoduleRecord, VolumeError};

pub use froc::{cpm, froc, FrocCurve, FrocPoint, FP_RATES};
pub use report::{
    ablation_report, froc_points_csv, render_montage, row_label, seg_scores_csv, AblationReport, ReportRow, VariantKey,
    TABLE_ROWS,
};
pub use seg::{overlap, seg_scores, SegScore, SegScores};

/// Consensus nodules per volume id; volumes without nodules still count as
/// scans.
pub type GroundTruthSet = BTreeMap<String, Vec<GroundTruthNodule>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("candidate references unknown volume {0:?}")]
    UnknownVolume(String),
    #[error("candidate on volume {volume_id:?} has no {field} score")]
    MissingScore { field: ScoreField, volume_id: String },
    #[error("expected {expected} sensitivities, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no ground-truth nodules with at least {consensus_filter} readers")]
    EmptyGroundTruth { consensus_filter: usize },
    #[error("consensus filter {0} outside 1..=4")]
    InvalidFilter(usize),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

pub fn save_ground_truth(path: &Path, gts: &GroundTruthSet) -> Result<(), EvalError> {
    let records: BTreeMap<&String, Vec<NoduleRecord>> =
        gts.iter().map(|(k, v)| (k, v.iter().map(GroundTruthNodule::to_record).collect())).collect();
    let text = serde_json::to_string(&records).map_err(|e| EvalError::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthSet, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let records: BTreeMap<String, Vec<NoduleRecord>> =
        serde_json::from_str(&text).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    records
        .into_iter()
        .map(|(k, v)| Ok((k, v.iter().map(NoduleRecord::to_nodule).collect::<Result<_, _>>()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_store::render_ellipsoid;

    #[test]
    fn ground_truth_file_round_trip() {
        let g = GroundTruthNodule::from_mask(&render_ellipsoid([16; 3], [8.0; 3], [2.5; 3]), 3).unwrap();
        let set: GroundTruthSet = [("a".to_string(), vec![g]), ("b".to_string(), vec![])].into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.json");
        save_ground_truth(&p, &set).unwrap();
        assert_eq!(load_ground_truth(&p).unwrap(), set);
    }
}
