//! Binary masks stored as windows into volume coordinates, plus run-length
//! coding and connected components.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::VolumeError;

/// A binary grid covering `origin .. origin + dims` of some volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    origin: [usize; 3],
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(origin: [usize; 3], dims: [usize; 3]) -> Self {
        Self {
            origin,
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn from_bits(origin: [usize; 3], dims: [usize; 3], bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), dims.iter().product::<usize>(), "mask bit count");
        Self { origin, dims, bits }
    }

    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// One past the last covered voxel on each axis.
    pub fn end(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a])
    }

    fn local_index(&self, v: [usize; 3]) -> Option<usize> {
        let mut l = [0usize; 3];
        for a in 0..3 {
            if v[a] < self.origin[a] || v[a] >= self.origin[a] + self.dims[a] {
                return None;
            }
            l[a] = v[a] - self.origin[a];
        }
        Some((l[0] * self.dims[1] + l[1]) * self.dims[2] + l[2])
    }

    /// Value at global voxel `v`; false outside the window.
    pub fn get(&self, v: [usize; 3]) -> bool {
        self.local_index(v).is_some_and(|i| self.bits[i])
    }

    /// Panics when `v` lies outside the window.
    pub fn set(&mut self, v: [usize; 3], value: bool) {
        let i = self.local_index(v).expect("voxel outside mask window");
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Global coordinates of set voxels in z-major order.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, h, w] = self.dims;
        let o = self.origin;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| [o[0] + i / (h * w), o[1] + (i / w) % h, o[2] + i % w])
    }

    /// Half-open global bounds `(lo, hi)` of the set voxels.
    pub fn bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for v in self.voxels() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a] + 1);
            }
        }
        any.then_some((lo, hi))
    }

    /// Copy restricted to the bounding box of the set voxels.
    pub fn tight(&self) -> Self {
        match self.bounds() {
            Some((lo, hi)) => self.window(lo, [0, 1, 2].map(|a| hi[a] - lo[a])),
            None => Self::empty(self.origin, [0, 0, 0]),
        }
    }

    /// Re-samples this mask onto another window (clipping what falls outside).
    pub fn window(&self, origin: [usize; 3], dims: [usize; 3]) -> Self {
        let mut out = Self::empty(origin, dims);
        for v in self.voxels() {
            if let Some(i) = out.local_index(v) {
                out.bits[i] = true;
            }
        }
        out
    }

    /// Mean voxel-center position `(v + 0.5)` of the set voxels.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for v in self.voxels() {
            for a in 0..3 {
                sum[a] += v[a] as f64 + 0.5;
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        let (small, big) = if self.bits.len() <= other.bits.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.voxels().filter(|v| big.get(*v)).count()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Full-volume boolean grid in z-major order.
    pub fn to_dense(&self, shape: [usize; 3]) -> Vec<bool> {
        let mut out = vec![false; shape.iter().product()];
        for v in self.voxels() {
            if v[0] < shape[0] && v[1] < shape[1] && v[2] < shape[2] {
                out[(v[0] * shape[1] + v[1]) * shape[2] + v[2]] = true;
            }
        }
        out
    }

    pub fn from_dense(shape: [usize; 3], bits: Vec<bool>) -> Self {
        Self::from_bits([0, 0, 0], shape, bits)
    }

    /// Volume-equivalent sphere diameter `2·(3V/4π)^(1/3)`.
    pub fn equivalent_diameter(&self) -> f64 {
        2.0 * (3.0 * self.count() as f64 / (4.0 * std::f64::consts::PI)).cbrt()
    }

    pub fn to_rle(&self) -> RleMask {
        RleMask {
            origin: self.origin,
            shape: self.dims,
            rle: rle_encode(&self.bits),
        }
    }
}

/// Serialized form of a [`BinaryMask`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub origin: [usize; 3],
    pub shape: [usize; 3],
    pub rle: Vec<u64>,
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask, VolumeError> {
        let bits = rle_decode(&self.rle, self.shape.iter().product())?;
        Ok(BinaryMask::from_bits(self.origin, self.shape, bits))
    }
}

/// Run lengths over z-major order, alternating zeros/ones and starting with a
/// (possibly empty) run of zeros.
pub fn rle_encode(bits: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Inverse of [`rle_encode`]; a short final run is padded with zeros.
pub fn rle_decode(runs: &[u64], total: usize) -> Result<Vec<bool>, VolumeError> {
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    for &r in runs {
        let r = usize::try_from(r).map_err(|_| VolumeError::BadRle("run too long".into()))?;
        if bits.len() + r > total {
            return Err(VolumeError::BadRle(format!("runs cover more than {total} voxels")));
        }
        bits.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    bits.resize(total, false);
    Ok(bits)
}

/// 26-connected components of a dense z-major grid, each as a tight mask,
/// ordered by first voxel in z-major order.
pub fn connected_components(shape: [usize; 3], bits: &[bool]) -> Vec<BinaryMask> {
    let [d, h, w] = shape;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut label = vec![usize::MAX; bits.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = Vec::new();
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let j = idx(nz as usize, ny as usize, nx as usize);
                        if bits[j] && label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &i in &members {
            let v = [i / (h * w), (i / w) % h, i % w];
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a] + 1);
            }
        }
        let mut m = BinaryMask::empty(lo, [0, 1, 2].map(|a| hi[a] - lo[a]));
        for &i in &members {
            m.set([i / (h * w), (i / w) % h, i % w], true);
        }
        comps.push(m);
    }
    comps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let runs = rle_encode(&bits);
            prop_assert_eq!(rle_decode(&runs, bits.len()).unwrap(), bits.clone());
            prop_assert_eq!(runs.iter().sum::<u64>() as usize, bits.len());
        }
    }

    #[test]
    fn rle_starts_with_zero_run() {
        assert_eq!(rle_encode(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(rle_encode(&[false, true]), vec![1, 1]);
        assert!(rle_decode(&[3, 5], 4).is_err());
        assert_eq!(rle_decode(&[1, 1], 4).unwrap(), vec![false, true, false, false]);
    }

    #[test]
    fn components_use_26_connectivity() {
        let shape = [4, 4, 4];
        let mut bits = vec![false; 64];
        let at = |z: usize, y: usize, x: usize| (z * 4 + y) * 4 + x;
        bits[at(0, 0, 0)] = true;
        bits[at(1, 1, 1)] = true; // diagonal neighbour
        bits[at(3, 3, 3)] = true;
        let comps = connected_components(shape, &bits);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].count(), 2);
        assert_eq!(comps[0].origin(), [0, 0, 0]);
        assert_eq!(comps[1].origin(), [3, 3, 3]);
    }

    #[test]
    fn window_iou_and_centroid() {
        let mut a = BinaryMask::empty([0, 0, 0], [4, 4, 4]);
        let mut b = BinaryMask::empty([2, 0, 0], [2, 4, 4]);
        for y in 0..2 {
            a.set([2, y, 0], true);
            a.set([3, y, 0], true);
            b.set([3, y, 0], true);
        }
        assert_eq!(a.intersection_count(&b), 2);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        let t = a.tight();
        assert_eq!(t.origin(), [2, 0, 0]);
        assert_eq!(t.dims(), [2, 2, 1]);
        assert_eq!(t.centroid().unwrap(), [3.0, 1.0, 0.5]);
        let rt = t.to_rle().decode().unwrap();
        assert_eq!(rt, t);
    }
}
