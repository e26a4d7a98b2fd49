//! FROC analysis under the distance hit criterion.

use serde::{Deserialize, Serialize};

use super::{EvalError, GroundTruthSet};
use crate::geometry3d::hit_test;
use crate::heads::{Candidate, ScoreField};
use crate::par;

/// False positives per scan at which sensitivity is reported.
pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Sensitivity and false-positive rate when keeping scores `>= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub false_positives: usize,
    pub fp_per_scan: f64,
    pub detected: usize,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrocCurve {
    /// Operating points from the strictest threshold down, starting with
    /// the empty selection at `+inf`.
    pub points: Vec<FrocPoint>,
    pub sensitivities: [f64; 7],
    pub cpm: f64,
    pub n_scans: usize,
    pub n_nodules: usize,
}

impl FrocCurve {
    /// Step interpolation: best sensitivity among points whose FP count is
    /// at most `rate` per scan.
    pub fn sensitivity_at(&self, rate: f64) -> f64 {
        let budget = rate * self.n_scans as f64;
        self.points
            .iter()
            .filter(|p| p.false_positives as f64 <= budget)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    }
}

/// Arithmetic mean of the seven sensitivities.
pub fn cpm(sensitivities: &[f64]) -> Result<f64, EvalError> {
    if sensitivities.len() != FP_RATES.len() {
        return Err(EvalError::Arity {
            expected: FP_RATES.len(),
            got: sensitivities.len(),
        });
    }
    if let Some(&s) = sensitivities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::OutOfRange(s));
    }
    Ok(sensitivities.iter().sum::<f64>() / sensitivities.len() as f64)
}

/// Sweeps every distinct candidate score. A nodule counts as detected once
/// any surviving candidate's box center hits it; surviving candidates that
/// hit no nodule are false positives, and extra hits on a detected nodule
/// count as neither. With no nodules at all, sensitivity is 0 throughout.
pub fn froc(candidates: &[Candidate], gts: &GroundTruthSet, field: ScoreField) -> Result<FrocCurve, EvalError> {
    let n_scans = gts.len();
    let n_nodules: usize = gts.values().map(Vec::len).sum();
    // (score, hit nodule indices into a flat list)
    let mut offsets = std::collections::BTreeMap::new();
    let mut acc = 0;
    for (id, v) in gts {
        offsets.insert(id.as_str(), acc);
        acc += v.len();
    }
    let mut scored = par::map(candidates.len(), |i| {
        let c = &candidates[i];
        let nodules = gts
            .get(&c.volume_id)
            .ok_or_else(|| EvalError::UnknownVolume(c.volume_id.clone()))?;
        let score = c.score(field).ok_or_else(|| EvalError::MissingScore {
            field,
            volume_id: c.volume_id.clone(),
        })?;
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::OutOfRange(score));
        }
        let base = offsets[c.volume_id.as_str()];
        let hits: Vec<usize> = nodules
            .iter()
            .enumerate()
            .filter(|(_, g)| hit_test(c.bbox.center, g))
            .map(|(i, _)| base + i)
            .collect();
        Ok((score, hits))
    })
    .into_iter()
    .collect::<Result<Vec<_>, EvalError>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let sens = |d: usize| if n_nodules == 0 { 0.0 } else { d as f64 / n_nodules as f64 };
    let mut detected = vec![false; n_nodules];
    let (mut n_det, mut n_fp) = (0usize, 0usize);
    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        false_positives: 0,
        fp_per_scan: 0.0,
        detected: 0,
        sensitivity: 0.0,
    }];
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            let hits = &scored[i].1;
            if hits.is_empty() {
                n_fp += 1;
            }
            for &h in hits {
                if !detected[h] {
                    detected[h] = true;
                    n_det += 1;
                }
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            false_positives: n_fp,
            fp_per_scan: if n_scans == 0 { 0.0 } else { n_fp as f64 / n_scans as f64 },
            detected: n_det,
            sensitivity: sens(n_det),
        });
    }
    let mut curve = FrocCurve {
        points,
        sensitivities: [0.0; 7],
        cpm: 0.0,
        n_scans,
        n_nodules,
    };
    curve.sensitivities = FP_RATES.map(|r| curve.sensitivity_at(r));
    curve.cpm = cpm(&curve.sensitivities)?;
    Ok(curve)
}
