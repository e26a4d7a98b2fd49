//! Self-describing output directories: every report file is derived from
//! the dump, ground truth and settings stored next to it.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nodulenet::evaluator::{
    ablation_report, froc, froc_points_csv, load_ground_truth, render_montage, row_label, seg_scores, seg_scores_csv,
    AblationReport, FrocCurve, ReportRow, VariantKey, TABLE_ROWS,
};
use nodulenet::geometry3d::hit_test;
use nodulenet::heads::{read_candidates, Candidate, ScoreField};

pub const DUMP: &str = "candidates.jsonl";
pub const GT: &str = "gt.json";
pub const SETTINGS: &str = "eval.json";
pub const REPORT: &str = "report.csv";
pub const ABLATION: &str = "ablation.json";

/// How a directory's dump is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub variant: Option<VariantKey>,
    pub fields: Vec<ScoreField>,
    pub consensus_filter: usize,
    pub matched_only: bool,
    pub montage: bool,
}

/// Top-level record of an ablation directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationIndex {
    pub variants: Vec<(VariantKey, String)>,
}

/// Inputs and provenance of one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    pub deterministic: bool,
    pub jobs: usize,
    pub inputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Score fields a variant reports in the ablation table.
pub fn table_fields(key: &VariantKey) -> Vec<ScoreField> {
    TABLE_ROWS.iter().filter(|(k, _)| k == key).map(|(_, f)| *f).collect()
}

fn load_dump(path: &Path) -> Result<Vec<Candidate>> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_candidates(BufReader::new(file))?)
}

/// FROC curves of a scored directory, one per configured field.
pub fn curves(dir: &Path) -> Result<(EvalSettings, Vec<(ScoreField, FrocCurve)>)> {
    let settings: EvalSettings = read_json(&dir.join(SETTINGS))?;
    let cands = load_dump(&dir.join(DUMP))?;
    let gts = load_ground_truth(&dir.join(GT))?;
    let mut out = Vec::new();
    for &f in &settings.fields {
        out.push((f, froc(&cands, &gts, f)?));
    }
    Ok((settings, out))
}

/// (Re)writes `report.csv`, `froc_points_<field>.csv`, `seg_scores.csv`
/// (when masks are present) and `montage.pgm` (when enabled) in `dir`.
pub fn render(dir: &Path) -> Result<AblationReport> {
    let (settings, curves) = curves(dir)?;
    let report = match &settings.variant {
        Some(k) => {
            let rows: Vec<_> = curves.iter().map(|(f, c)| (*k, *f, c.clone())).collect();
            let mut r = ablation_report(&rows);
            // fields outside the table still get a row, after the table ones
            for (f, c) in &curves {
                let label = row_label(k, *f);
                if !r.rows.iter().any(|row| row.method == label) {
                    r.rows.push(ReportRow {
                        method: label,
                        sensitivities: c.sensitivities,
                        cpm: c.cpm,
                    });
                }
            }
            r
        }
        None => AblationReport {
            rows: curves
                .iter()
                .map(|(f, c)| ReportRow {
                    method: format!("dump ({})", f.name().to_uppercase()),
                    sensitivities: c.sensitivities,
                    cpm: c.cpm,
                })
                .collect(),
        },
    };
    fs::write(dir.join(REPORT), report.to_csv())?;
    for (f, c) in &curves {
        fs::write(dir.join(format!("froc_points_{}.csv", f.name())), froc_points_csv(c))?;
    }

    let cands = load_dump(&dir.join(DUMP))?;
    if cands.iter().any(|c| c.mask.is_some()) {
        let gts = load_ground_truth(&dir.join(GT))?;
        let rank = settings.fields.last().copied().unwrap_or(ScoreField::Ncs);
        let seg = seg_scores(&cands, &gts, settings.consensus_filter, settings.matched_only, rank)?;
        fs::write(dir.join("seg_scores.csv"), seg_scores_csv(&seg))?;
        if settings.montage {
            let mut pairs = Vec::new();
            for (id, nodules) in &gts {
                for g in nodules.iter().filter(|g| g.n_readers >= settings.consensus_filter) {
                    let best = cands
                        .iter()
                        .filter(|c| &c.volume_id == id && c.mask.is_some() && hit_test(c.bbox.center, g))
                        .max_by(|a, b| {
                            let s = |c: &Candidate| c.score(rank).unwrap_or(c.p_ncs);
                            s(a).total_cmp(&s(b))
                        });
                    pairs.push((g, best));
                }
            }
            fs::write(dir.join("montage.pgm"), render_montage(&pairs, 32))?;
        }
    }
    Ok(report)
}

/// Renders every variant of an ablation directory and the combined table.
pub fn render_ablation(dir: &Path) -> Result<AblationReport> {
    let index: AblationIndex = read_json(&dir.join(ABLATION))?;
    let mut rows = Vec::new();
    for (key, sub) in &index.variants {
        render(&dir.join(sub))?;
        let (_, curves) = curves(&dir.join(sub))?;
        rows.extend(curves.into_iter().map(|(f, c)| (*key, f, c)));
    }
    let report = ablation_report(&rows);
    fs::write(dir.join(REPORT), report.to_csv())?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    Ok(report)
}
