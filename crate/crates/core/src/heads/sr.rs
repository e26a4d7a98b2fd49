//! Segmentation refinement: upsamples cropped decoder features back to input
//! resolution inside a candidate box.

use super::HeadsError;
use crate::backbone::FeatureEndpoints;
use crate::geometry3d::Box3D;
use crate::nn::layers::{Conv3d, Upsample2};
use crate::nn::{NodeId, ParamBuilder, Tape};
use crate::tensor::Tensor;
use crate::volume_store::BinaryMask;

/// Crop extents are multiples of this so every endpoint crop is whole.
pub const CROP_ALIGN: usize = 4;

/// Voxel region the mask head operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrCrop {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl SrCrop {
    /// Expands `bbox` by `margin` per side, snaps outward to multiples of 4
    /// and clips to the volume.
    pub fn around(bbox: &Box3D, margin: f64, volume_shape: [usize; 3]) -> Result<Self, HeadsError> {
        let grown = bbox.expand(margin);
        let (lo, hi) = (grown.lo(), grown.hi());
        let mut origin = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            let limit = volume_shape[a] / CROP_ALIGN * CROP_ALIGN;
            let l = ((lo[a] / CROP_ALIGN as f64).floor().max(0.0) as usize * CROP_ALIGN).min(limit);
            let h = (((hi[a] / CROP_ALIGN as f64).ceil().max(0.0) as usize) * CROP_ALIGN).min(limit);
            if !(lo[a].is_finite() && hi[a].is_finite()) || h <= l {
                return Err(HeadsError::EmptyCrop { bbox: *bbox });
            }
            origin[a] = l;
            size[a] = h - l;
        }
        Ok(Self { origin, size })
    }

    pub fn scaled(&self, stride: usize) -> ([usize; 3], [usize; 3]) {
        (self.origin.map(|v| v / stride), self.size.map(|v| v / stride))
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct SrHead {
    up4: Upsample2,
    fuse2: Conv3d,
    up2: Upsample2,
    fuse1: Conv3d,
    out: Conv3d,
}

impl SrHead {
    /// `widths` are the channel counts of `(down_1, down_2, feature_map_4)`.
    pub fn new(b: &mut ParamBuilder<'_>, widths: [usize; 3]) -> Self {
        let [c1, c2, c4] = widths;
        b.scope("sr", |b| Self {
            up4: Upsample2::new(b, "up4", c4, c2, true),
            fuse2: Conv3d::new(b, "fuse2", 2 * c2, c2, 3, 1, 1, true),
            up2: Upsample2::new(b, "up2", c2, c1, true),
            fuse1: Conv3d::new(b, "fuse1", 2 * c1, c1, 3, 1, 1, true),
            out: Conv3d::head(b, "out", c1, 1, (1.0 / c1 as f32).sqrt(), 0.0),
        })
    }

    /// Mask logits `[1, d, h, w]` over `crop`.
    pub fn forward(&self, tape: &mut Tape<'_>, f: &FeatureEndpoints, crop: &SrCrop) -> NodeId {
        let (o4, s4) = crop.scaled(4);
        let (o2, s2) = crop.scaled(2);
        let x = tape.crop(f.feature_map_4, o4, s4);
        let x = self.up4.forward(tape, x);
        let skip = tape.crop(f.down_2, o2, s2);
        let x = tape.concat(&[x, skip]);
        let x = self.fuse2.forward(tape, x);
        let x = tape.relu(x);
        let x = self.up2.forward(tape, x);
        let skip = tape.crop(f.down_1, crop.origin, crop.size);
        let x = tape.concat(&[x, skip]);
        let x = self.fuse1.forward(tape, x);
        let x = tape.relu(x);
        self.out.forward(tape, x)
    }
}

/// Mask probabilities over a crop placed in the volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub crop: SrCrop,
    pub probs: Vec<f32>,
}

impl MaskPrediction {
    pub fn from_logits(crop: SrCrop, logits: &Tensor) -> Self {
        assert_eq!(logits.len(), crop.volume(), "mask logits cover the crop");
        Self {
            crop,
            probs: logits.data().iter().map(|&v| super::losses::sigmoid(v)).collect(),
        }
    }

    /// Voxels with probability above one half.
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask::from_bits(self.crop.origin, self.crop.size, self.probs.iter().map(|&p| p > 0.5).collect())
    }
}

/// Ground truth restricted to the crop, as 0/1 floats.
pub fn crop_target(mask: &BinaryMask, crop: &SrCrop) -> Vec<f32> {
    mask.window(crop.origin, crop.size)
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect()
}
