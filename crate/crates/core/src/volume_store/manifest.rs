//! Dataset manifests and fold assignment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VolumeError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub annotation: PathBuf,
    #[serde(default)]
    pub fold: Option<usize>,
}

/// Volume/annotation pairs. Relative paths resolve against `base_dir`,
/// which is the manifest file's directory when loaded from disk.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn volume_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.entries[i].volume)
    }

    pub fn annotation_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.entries[i].annotation)
    }

    /// True when every entry carries a fold index.
    pub fn is_split(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.fold.is_some())
    }

    /// Entry indices per fold; entries without a fold are skipped.
    pub fn folds(&self) -> Vec<Vec<usize>> {
        let k = self.entries.iter().filter_map(|e| e.fold).max().map_or(0, |m| m + 1);
        let mut out = vec![Vec::new(); k];
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(f) = e.fold {
                out[f].push(i);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, VolumeError> {
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(path)?)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    /// Writes entries as a JSON list; paths are stored as given.
    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        let mut json = serde_json::to_vec_pretty(&self.entries)?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }
}

/// Assigns each entry to one of `k` folds via a seeded permutation; fold sizes
/// differ by at most one.
pub fn split_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest, VolumeError> {
    if k < 2 || manifest.len() < k {
        return Err(VolumeError::TooFewEntries {
            entries: manifest.len(),
            k,
        });
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (pos, &i) in order.iter().enumerate() {
        out.entries[i].fold = Some(pos % k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                volume: format!("v{i}.mha").into(),
                annotation: format!("v{i}.json").into(),
                fold: None,
            })
            .collect();
        DatasetManifest::new(entries, "")
    }

    fn sizes(m: &DatasetManifest) -> Vec<usize> {
        m.folds().iter().map(Vec::len).collect()
    }

    #[test]
    fn fold_sizes() {
        assert_eq!(sizes(&split_folds(&manifest(12), 6, 1).unwrap()), vec![2; 6]);
        assert_eq!(sizes(&split_folds(&manifest(13), 6, 1).unwrap()), vec![3, 2, 2, 2, 2, 2]);
        assert!(matches!(split_folds(&manifest(5), 6, 1), Err(VolumeError::TooFewEntries { .. })));
        assert!(split_folds(&manifest(5), 1, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split_folds(&manifest(20), 6, 9).unwrap();
        assert_eq!(a, split_folds(&manifest(20), 6, 9).unwrap());
        assert_ne!(a, split_folds(&manifest(20), 6, 10).unwrap());
        assert!(a.is_split());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let m = split_folds(&manifest(7), 3, 2).unwrap();
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.volume_path(0), dir.path().join("v0.mha"));
    }
}
