//! Volumes, annotations, consensus ground truth, phantoms and dataset manifests.

mod consensus;
mod manifest;
mod mask;
mod phantom;
mod volume;

use thiserror::Error;

pub use consensus::{
    load_annotations, merge_annotations, save_annotations, GroundTruthNodule, NoduleRecord, ReaderMask,
    SAME_NODULE_IOU,
};
pub use manifest::{split_folds, DatasetManifest, ManifestEntry};
pub use mask::{connected_components, rle_decode, rle_encode, BinaryMask, RleMask};
pub use phantom::{generate_phantom, render_ellipsoid, PhantomSpec};
pub use volume::{load_volume, save_volume, save_volume_as, ElementType, Volume};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed json: {0}")]
    Json(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported element type {0:?}")]
    UnsupportedElementType(String),
    #[error("dimensions {0:?} overflow the addressable payload")]
    DimensionOverflow([u64; 3]),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} bytes of trailing data after payload")]
    TrailingData(usize),
    #[error("invalid run-length mask: {0}")]
    BadRle(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("reader {reader} has two components overlapping with IoU {iou:.3}")]
    SameReaderOverlap { reader: u8, iou: f64 },
    #[error("could not place nodules for {0}")]
    Placement(String),
    #[error("cannot split {entries} entries into {k} folds")]
    TooFewEntries { entries: usize, k: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl From<std::io::Error> for VolumeError {
    fn from(e: std::io::Error) -> Self {
        VolumeError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for VolumeError {
    fn from(e: serde_json::Error) -> Self {
        VolumeError::Json(e.to_string())
    }
}
