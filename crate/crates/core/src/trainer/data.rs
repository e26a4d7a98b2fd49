use crate::volume_store::{load_annotations, load_volume, merge_annotations, DatasetManifest, GroundTruthNodule, Volume};

use super::TrainError;

/// A volume with its consensus nodules.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub volume: Volume,
    pub nodules: Vec<GroundTruthNodule>,
}

/// Loads entry `i`, merging reader masks with the given consensus level.
pub fn load_sample(manifest: &DatasetManifest, i: usize, min_readers: usize) -> Result<TrainSample, TrainError> {
    let volume = load_volume(&manifest.volume_path(i))?;
    let readers = load_annotations(&manifest.annotation_path(i), volume.shape())?;
    let nodules = merge_annotations(&readers, min_readers)?;
    Ok(TrainSample { volume, nodules })
}

pub fn load_dataset(manifest: &DatasetManifest, indices: &[usize], min_readers: usize) -> Result<Vec<TrainSample>, TrainError> {
    indices.iter().map(|&i| load_sample(manifest, i, min_readers)).collect()
}
