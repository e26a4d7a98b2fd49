//! Synthetic volumes with ellipsoidal nodules in Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::consensus::{sort_nodules, GroundTruthNodule};
use super::mask::BinaryMask;
use super::volume::Volume;
use super::VolumeError;
use crate::par;

const MAX_ATTEMPTS: usize = 2000;
const AXIS_RATIO: (f64, f64) = (0.8, 1.25);
/// Extra gap between bounding spheres so nodules never touch, even diagonally.
const SEPARATION_MARGIN: f64 = 2.0;
const PHANTOM_READERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_nodules: usize,
    pub diameter_range_vox: [f64; 2],
    pub nodule_intensity: f32,
    pub background_noise_sd: f32,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let [lo, hi] = self.diameter_range_vox;
        let min_side = *self.shape.iter().min().unwrap_or(&0) as f64;
        if self.shape.contains(&0) {
            return Err(VolumeError::Invalid(format!("phantom shape {:?} has a zero side", self.shape)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(VolumeError::Invalid(format!("diameter range {:?} must be positive and ordered", self.diameter_range_vox)));
        }
        if hi >= min_side {
            return Err(VolumeError::Invalid(format!(
                "max diameter {hi} must be below the smallest side {min_side}"
            )));
        }
        if !(self.background_noise_sd >= 0.0 && self.background_noise_sd.is_finite() && self.nodule_intensity.is_finite()) {
            return Err(VolumeError::Invalid("noise sd must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Voxels whose centers fall inside the axis-aligned ellipsoid, as a tight mask.
///
/// `center` is continuous (voxel `v` has center `v + 0.5`).
pub fn render_ellipsoid(shape: [usize; 3], center: [f64; 3], semi_axes: [f64; 3]) -> BinaryMask {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        lo[a] = (center[a] - semi_axes[a] - 0.5).floor().max(0.0) as usize;
        hi[a] = ((center[a] + semi_axes[a] + 0.5).ceil().max(0.0) as usize).min(shape[a]);
        hi[a] = hi[a].max(lo[a]);
    }
    let mut mask = BinaryMask::empty(lo, [0, 1, 2].map(|a| hi[a] - lo[a]));
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for x in lo[2]..hi[2] {
                let v = [z, y, x];
                let r: f64 = (0..3)
                    .map(|a| ((v[a] as f64 + 0.5 - center[a]) / semi_axes[a]).powi(2))
                    .sum();
                if r <= 1.0 {
                    mask.set(v, true);
                }
            }
        }
    }
    mask.tight()
}

/// Noise volume plus ellipsoids; bit-reproducible from the spec.
///
/// Nodule placement uses RNG stream 0 and each z-slice of noise its own
/// stream, so the output does not depend on the thread count.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Vec<GroundTruthNodule>), VolumeError> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<([f64; 3], [f64; 3])> = Vec::new();
    for _ in 0..spec.n_nodules {
        let mut ok = false;
        for _ in 0..MAX_ATTEMPTS {
            let diameter = rng.random_range(spec.diameter_range_vox[0]..=spec.diameter_range_vox[1]);
            let semi = [0; 3].map(|_| diameter / 2.0 * rng.random_range(AXIS_RATIO.0..=AXIS_RATIO.1));
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let (lo, hi) = (semi[a] + 1.0, spec.shape[a] as f64 - semi[a] - 1.0);
                if lo > hi {
                    fits = false;
                    break;
                }
                center[a] = rng.random_range(lo..=hi);
            }
            if !fits {
                continue;
            }
            let reach = semi.iter().cloned().fold(0.0, f64::max);
            let clear = placed.iter().all(|(c, s)| {
                let other = s.iter().cloned().fold(0.0, f64::max);
                let dist = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                dist >= reach + other + SEPARATION_MARGIN
            });
            if clear {
                placed.push((center, semi));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(VolumeError::Placement(format!("{spec:?} after {MAX_ATTEMPTS} attempts")));
        }
    }

    let mut voxels = vec![0f32; d * h * w];
    let noise = Normal::new(0.0f32, spec.background_noise_sd).map_err(|e| VolumeError::Invalid(e.to_string()))?;
    par::for_each_chunk_mut(&mut voxels, h * w, |z, slice| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(z as u64 + 1);
        for v in slice.iter_mut() {
            *v = noise.sample(&mut r);
        }
    });

    let mut nodules = Vec::with_capacity(placed.len());
    for (center, semi) in &placed {
        let mask = render_ellipsoid(spec.shape, *center, *semi);
        for v in mask.voxels() {
            voxels[(v[0] * h + v[1]) * w + v[2]] += spec.nodule_intensity;
        }
        if let Some(n) = GroundTruthNodule::from_mask(&mask, PHANTOM_READERS) {
            nodules.push(n);
        }
    }
    sort_nodules(&mut nodules);
    let volume = Volume::new(format!("phantom-{}", spec.seed), spec.shape, [1.0; 3], voxels)?;
    Ok((volume, nodules))
}
