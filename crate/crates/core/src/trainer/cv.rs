//! k-fold cross-validation producing one merged candidate dump.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{load_dataset, load_sample};
use super::run::Trainer;
use super::TrainError;
use crate::heads::{write_candidates, Candidate};
use crate::volume_store::{split_folds, DatasetManifest};

pub const DUMP_FILE: &str = "candidates.jsonl";

/// Which volumes trained and which were scored in one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub dump: PathBuf,
    pub candidates: Vec<Candidate>,
    pub folds: Vec<FoldSplit>,
}

fn run_fold(
    manifest: &DatasetManifest,
    folds: &[Vec<usize>],
    f: usize,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(FoldSplit, Vec<Candidate>), TrainError> {
    let train_idx: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(g, _)| *g != f)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let dir = out_dir.join(format!("fold_{f}"));
    fs::create_dir_all(&dir)?;
    let train = load_dataset(manifest, &train_idx, config.min_readers)?;
    let mut trainer = Trainer::new(config, Some(&dir))?;
    trainer.train(&train)?;
    let net = trainer.into_net();
    let mut split = FoldSplit {
        fold: f,
        train: train.iter().map(|s| s.volume.id.clone()).collect(),
        test: Vec::new(),
    };
    drop(train);
    let mut cands = Vec::new();
    for &i in &folds[f] {
        let s = load_sample(manifest, i, config.min_readers)?;
        split.test.push(s.volume.id.clone());
        cands.extend(net.detect(&s.volume)?);
    }
    fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&split).map_err(|e| TrainError::Io(e.to_string()))?,
    )?;
    write_candidates(fs::File::create(dir.join(DUMP_FILE))?, &cands)?;
    Ok((split, cands))
}

/// Trains one model per fold on the remaining folds and scores the held-out
/// volumes. An unsplit manifest is split with `config.folds` and the
/// experiment seed. Folds run on up to `jobs` threads; results do not depend
/// on `jobs`.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    config: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<CvOutcome, TrainError> {
    config.validate()?;
    let split;
    let manifest = if manifest.is_split() {
        manifest
    } else {
        split = split_folds(manifest, config.folds, config.seed)?;
        &split
    };
    let folds = manifest.folds();
    fs::create_dir_all(out_dir)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(FoldSplit, Vec<Candidate>), TrainError>>>> =
        Mutex::new((0..folds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, folds.len().max(1)) {
            s.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::SeqCst);
                if f >= folds.len() {
                    break;
                }
                let r = run_fold(manifest, &folds, f, config, out_dir);
                results.lock().expect("fold results lock")[f] = Some(r);
            });
        }
    });

    let mut out = CvOutcome {
        dump: out_dir.join(DUMP_FILE),
        candidates: Vec::new(),
        folds: Vec::new(),
    };
    for r in results.into_inner().expect("fold results lock") {
        let (split, cands) = r.expect("every fold ran")?;
        out.folds.push(split);
        out.candidates.extend(cands);
    }
    write_candidates(fs::File::create(&out.dump)?, &out.candidates)?;
    Ok(out)
}
