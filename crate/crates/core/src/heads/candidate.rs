//! Detections and their JSON-lines dump format.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HeadsError;
use crate::geometry3d::Box3D;
use crate::volume_store::{BinaryMask, RleMask};

/// Which probability ranks candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    Ncs,
    Fpr,
    Fu,
}

impl ScoreField {
    pub const ALL: [ScoreField; 3] = [ScoreField::Ncs, ScoreField::Fpr, ScoreField::Fu];

    pub fn name(self) -> &'static str {
        match self {
            ScoreField::Ncs => "ncs",
            ScoreField::Fpr => "fpr",
            ScoreField::Fu => "fu",
        }
    }
}

impl fmt::Display for ScoreField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreField {
    type Err = HeadsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_start_matches("p_") {
            "ncs" => Ok(ScoreField::Ncs),
            "fpr" => Ok(ScoreField::Fpr),
            "fu" => Ok(ScoreField::Fu),
            _ => Err(HeadsError::UnknownScoreField(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub volume_id: String,
    pub bbox: Box3D,
    pub p_ncs: f64,
    pub p_fpr: Option<f64>,
    pub p_fu: Option<f64>,
    pub mask: Option<BinaryMask>,
}

impl Candidate {
    pub fn score(&self, field: ScoreField) -> Option<f64> {
        match field {
            ScoreField::Ncs => Some(self.p_ncs),
            ScoreField::Fpr => self.p_fpr,
            ScoreField::Fu => self.p_fu,
        }
    }

    pub fn to_record(&self) -> CandidateRecord {
        CandidateRecord {
            volume_id: self.volume_id.clone(),
            center: self.bbox.center,
            size: self.bbox.size,
            p_ncs: self.p_ncs,
            p_fpr: self.p_fpr,
            p_fu: self.p_fu,
            rle_mask: self.mask.as_ref().map(BinaryMask::to_rle),
        }
    }
}

/// One line of a candidate dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub volume_id: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub p_ncs: f64,
    #[serde(default)]
    pub p_fpr: Option<f64>,
    #[serde(default)]
    pub p_fu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle_mask: Option<RleMask>,
}

impl CandidateRecord {
    pub fn into_candidate(self) -> Result<Candidate, String> {
        let bbox = Box3D::new(self.center, self.size).map_err(|e| e.to_string())?;
        for p in [Some(self.p_ncs), self.p_fpr, self.p_fu].into_iter().flatten() {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        let mask = self.rle_mask.map(|m| m.decode()).transpose().map_err(|e| e.to_string())?;
        Ok(Candidate {
            volume_id: self.volume_id,
            bbox,
            p_ncs: self.p_ncs,
            p_fpr: self.p_fpr,
            p_fu: self.p_fu,
            mask,
        })
    }
}

pub fn write_candidates<W: Write>(mut out: W, candidates: &[Candidate]) -> Result<(), HeadsError> {
    for c in candidates {
        let line = serde_json::to_string(&c.to_record()).map_err(|e| HeadsError::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a dump; blank lines are skipped.
pub fn read_candidates<R: BufRead>(input: R) -> Result<Vec<Candidate>, HeadsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| HeadsError::Dump { line: i + 1, message };
        let rec: CandidateRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(rec.into_candidate().map_err(err)?);
    }
    Ok(out)
}
