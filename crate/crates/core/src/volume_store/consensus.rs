//! Multi-reader annotation merging.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{connected_components, rle_decode, rle_encode, BinaryMask, RleMask};
use super::VolumeError;
use crate::geometry3d::{mask_to_box, Box3D};

/// Mask IoU above which two reader components describe the same nodule.
pub const SAME_NODULE_IOU: f64 = 0.4;

/// One reader's annotation over a whole volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderMask {
    pub reader_id: u8,
    pub mask: BinaryMask,
}

impl ReaderMask {
    /// Mask covering the full volume `shape`.
    pub fn new(reader_id: u8, shape: [usize; 3], bits: Vec<bool>) -> Self {
        Self {
            reader_id,
            mask: BinaryMask::from_dense(shape, bits),
        }
    }
}

/// A consensus nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthNodule {
    /// Tight window around the consensus voxels.
    pub consensus_mask: BinaryMask,
    pub bbox: Box3D,
    pub center_vox: [f64; 3],
    pub diameter_vox: f64,
    pub n_readers: usize,
}

impl GroundTruthNodule {
    /// Derives box, centroid and equivalent diameter from a nonempty mask.
    pub fn from_mask(mask: &BinaryMask, n_readers: usize) -> Option<Self> {
        let tight = mask.tight();
        let bbox = mask_to_box(&tight).ok()?;
        Some(Self {
            center_vox: tight.centroid()?,
            diameter_vox: tight.equivalent_diameter(),
            consensus_mask: tight,
            bbox,
            n_readers,
        })
    }

    pub fn to_record(&self) -> NoduleRecord {
        NoduleRecord {
            center: self.center_vox,
            diameter: self.diameter_vox,
            n_readers: self.n_readers,
            mask: self.consensus_mask.to_rle(),
        }
    }
}

/// Serialized ground-truth nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoduleRecord {
    pub center: [f64; 3],
    pub diameter: f64,
    pub n_readers: usize,
    pub mask: RleMask,
}

impl NoduleRecord {
    pub fn to_nodule(&self) -> Result<GroundTruthNodule, VolumeError> {
        let mask = self.mask.decode()?;
        let bbox = mask_to_box(&mask).map_err(|e| VolumeError::Invalid(e.to_string()))?;
        Ok(GroundTruthNodule {
            consensus_mask: mask,
            bbox,
            center_vox: self.center,
            diameter_vox: self.diameter,
            n_readers: self.n_readers,
        })
    }
}

struct Component {
    reader: u8,
    mask: BinaryMask,
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut root = i;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = i;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

/// Clusters reader components by transitive closure of mask IoU > 0.4 and
/// keeps clusters annotated by at least `min_readers` distinct readers.
///
/// The consensus voxel set is every voxel marked by at least half of the
/// cluster's readers. Output is sorted by centroid, so it does not depend on
/// reader or component order.
pub fn merge_annotations(masks: &[ReaderMask], min_readers: usize) -> Result<Vec<GroundTruthNodule>, VolumeError> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let shape = first.mask.end();
    let mut comps = Vec::new();
    for m in masks {
        if m.mask.end() != shape || m.mask.origin() != [0, 0, 0] {
            return Err(VolumeError::ShapeMismatch {
                expected: shape,
                got: m.mask.end(),
            });
        }
        for c in connected_components(shape, m.mask.bits()) {
            comps.push(Component {
                reader: m.reader_id,
                mask: c,
            });
        }
    }

    let n = comps.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let iou = comps[i].mask.iou(&comps[j].mask);
            if iou <= SAME_NODULE_IOU {
                continue;
            }
            if comps[i].reader == comps[j].reader {
                return Err(VolumeError::SameReaderOverlap {
                    reader: comps[i].reader,
                    iou,
                });
            }
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[root_slot[r]].push(i);
    }

    let mut out = Vec::new();
    for members in clusters {
        let mut readers: Vec<u8> = members.iter().map(|&i| comps[i].reader).collect();
        readers.sort_unstable();
        readers.dedup();
        if readers.len() < min_readers {
            continue;
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &i in &members {
            let m = &comps[i].mask;
            for a in 0..3 {
                lo[a] = lo[a].min(m.origin()[a]);
                hi[a] = hi[a].max(m.end()[a]);
            }
        }
        let dims = [0, 1, 2].map(|a| hi[a] - lo[a]);
        // votes per voxel, one per reader
        let mut votes = vec![0usize; dims.iter().product()];
        for r in &readers {
            let mut marked = BinaryMask::empty(lo, dims);
            for &i in members.iter().filter(|&&i| comps[i].reader == *r) {
                for v in comps[i].mask.voxels() {
                    marked.set(v, true);
                }
            }
            for (vote, &b) in votes.iter_mut().zip(marked.bits()) {
                if b {
                    *vote += 1;
                }
            }
        }
        let bits = votes.iter().map(|&v| 2 * v >= readers.len()).collect();
        let consensus = BinaryMask::from_bits(lo, dims, bits);
        if let Some(nodule) = GroundTruthNodule::from_mask(&consensus, readers.len()) {
            out.push(nodule);
        }
    }
    sort_nodules(&mut out);
    Ok(out)
}

/// Canonical nodule order: by centroid, then by voxel count.
pub(crate) fn sort_nodules(nodules: &mut [GroundTruthNodule]) {
    nodules.sort_by(|a, b| {
        (0..3)
            .map(|ax| a.center_vox[ax].total_cmp(&b.center_vox[ax]))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.consensus_mask.count().cmp(&b.consensus_mask.count()))
    });
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<[usize; 3]>,
    readers: Vec<ReaderRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReaderRecord {
    reader_id: u8,
    rle: Vec<u64>,
}

/// Writes `{"shape":[d,h,w],"readers":[{"reader_id":..,"rle":[..]}]}`.
pub fn save_annotations(path: &Path, shape: [usize; 3], readers: &[ReaderMask]) -> Result<(), VolumeError> {
    let doc = AnnotationDoc {
        shape: Some(shape),
        readers: readers
            .iter()
            .map(|r| ReaderRecord {
                reader_id: r.reader_id,
                rle: rle_encode(&r.mask.to_dense(shape)),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

/// Reads reader masks for a volume of the given shape.
pub fn load_annotations(path: &Path, shape: [usize; 3]) -> Result<Vec<ReaderMask>, VolumeError> {
    let doc: AnnotationDoc = serde_json::from_slice(&fs::read(path)?)?;
    if let Some(s) = doc.shape {
        if s != shape {
            return Err(VolumeError::ShapeMismatch { expected: shape, got: s });
        }
    }
    let total = shape.iter().product();
    doc.readers
        .into_iter()
        .map(|r| {
            if r.reader_id > 3 {
                return Err(VolumeError::Invalid(format!("reader id {} outside 0..=3", r.reader_id)));
            }
            Ok(ReaderMask::new(r.reader_id, shape, rle_decode(&r.rle, total)?))
        })
        .collect()
}
