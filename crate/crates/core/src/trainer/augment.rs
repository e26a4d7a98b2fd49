//! Training-time augmentation of a volume together with its nodules.

use std::f64::consts::TAU;

use rand::Rng;

use crate::volume_store::{BinaryMask, GroundTruthNodule, Volume, VolumeError};

/// Random flips (each axis with probability one half), then, if `rotate`,
/// an in-plane rotation about the z axis by a uniform angle.
pub fn augment<R: Rng>(
    volume: &Volume,
    nodules: &[GroundTruthNodule],
    rotate: bool,
    rng: &mut R,
) -> Result<(Volume, Vec<GroundTruthNodule>), VolumeError> {
    let axes = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    let (v, n) = flip(volume, nodules, axes)?;
    if rotate {
        let angle = rng.random_range(0.0..TAU);
        rotate_z(&v, &n, angle)
    } else {
        Ok((v, n))
    }
}

fn rebuild(nodules: impl IntoIterator<Item = (BinaryMask, usize)>) -> Vec<GroundTruthNodule> {
    nodules
        .into_iter()
        .filter_map(|(m, r)| GroundTruthNodule::from_mask(&m, r))
        .collect()
}

/// Mirrors along each axis flagged in `axes` (`[z, y, x]`).
pub fn flip(
    volume: &Volume,
    nodules: &[GroundTruthNodule],
    axes: [bool; 3],
) -> Result<(Volume, Vec<GroundTruthNodule>), VolumeError> {
    if !axes.iter().any(|&a| a) {
        return Ok((volume.clone(), nodules.to_vec()));
    }
    let s = volume.shape();
    let map = |v: [usize; 3]| [0, 1, 2].map(|a| if axes[a] { s[a] - 1 - v[a] } else { v[a] });
    let src = volume.voxels();
    let mut out = vec![0.0f32; src.len()];
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                let m = map([z, y, x]);
                out[(m[0] * s[1] + m[1]) * s[2] + m[2]] = src[(z * s[1] + y) * s[2] + x];
            }
        }
    }
    let vol = Volume::new(volume.id.clone(), s, volume.spacing_mm(), out)?;
    let masks = nodules.iter().map(|n| {
        let m = &n.consensus_mask;
        let (o, e) = (m.origin(), m.end());
        let origin = [0, 1, 2].map(|a| if axes[a] { s[a] - e[a] } else { o[a] });
        let mut f = BinaryMask::empty(origin, m.dims());
        for v in m.voxels() {
            f.set(map(v), true);
        }
        (f, n.n_readers)
    });
    Ok((vol, rebuild(masks)))
}

/// Rotates the `(y, x)` plane by `angle` radians about the volume center.
///
/// Intensities are resampled trilinearly with border replication, masks by
/// nearest neighbour. Nodules that leave the volume entirely are dropped.
pub fn rotate_z(
    volume: &Volume,
    nodules: &[GroundTruthNodule],
    angle: f64,
) -> Result<(Volume, Vec<GroundTruthNodule>), VolumeError> {
    let s = volume.shape();
    let (cy, cx) = (s[1] as f64 / 2.0, s[2] as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    // inverse map: output point -> source point
    let back = |y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    };
    let fwd = |y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    let src = volume.voxels();
    let plane = s[1] * s[2];
    let mut out = vec![0.0f32; src.len()];
    for y in 0..s[1] {
        for x in 0..s[2] {
            let (sy, sx) = back(y as f64 + 0.5, x as f64 + 0.5);
            let fy = (sy - 0.5).clamp(0.0, (s[1] - 1) as f64);
            let fx = (sx - 0.5).clamp(0.0, (s[2] - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s[1] - 1), (x0 + 1).min(s[2] - 1));
            let (wy, wx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            for z in 0..s[0] {
                let p = &src[z * plane..(z + 1) * plane];
                let at = |yy: usize, xx: usize| p[yy * s[2] + xx];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[z * plane + y * s[2] + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    let vol = Volume::new(volume.id.clone(), s, volume.spacing_mm(), out)?;

    let masks = nodules.iter().map(|n| {
        let m = &n.consensus_mask;
        let (o, e) = (m.origin(), m.end());
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (y, x) in [(o[1], o[2]), (o[1], e[2]), (e[1], o[2]), (e[1], e[2])] {
            let (ry, rx) = fwd(y as f64, x as f64);
            lo = [lo[0].min(ry), lo[1].min(rx)];
            hi = [hi[0].max(ry), hi[1].max(rx)];
        }
        let span = |l: f64, h: f64, n: usize| {
            let a = (l.floor() - 1.0).clamp(0.0, n as f64) as usize;
            let b = (h.ceil() + 1.0).clamp(0.0, n as f64) as usize;
            (a, b.max(a))
        };
        let (y0, y1) = span(lo[0], hi[0], s[1]);
        let (x0, x1) = span(lo[1], hi[1], s[2]);
        let mut r = BinaryMask::empty([o[0], y0, x0], [m.dims()[0], y1 - y0, x1 - x0]);
        for y in y0..y1 {
            for x in x0..x1 {
                let (sy, sx) = back(y as f64 + 0.5, x as f64 + 0.5);
                if sy < 0.0 || sx < 0.0 {
                    continue;
                }
                let (iy, ix) = (sy.floor() as usize, sx.floor() as usize);
                for z in o[0]..e[0] {
                    if m.get([z, iy, ix]) {
                        r.set([z, y, x], true);
                    }
                }
            }
        }
        (r, n.n_readers)
    });
    Ok((vol, rebuild(masks)))
}

/// Sub-volume `origin .. origin + size` with nodules clipped to it and
/// re-expressed in crop coordinates.
pub fn crop_sample(
    volume: &Volume,
    nodules: &[GroundTruthNodule],
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<(Volume, Vec<GroundTruthNodule>), VolumeError> {
    let s = volume.shape();
    if (0..3).any(|a| origin[a] + size[a] > s[a]) {
        return Err(VolumeError::ShapeMismatch {
            expected: s,
            got: [0, 1, 2].map(|a| origin[a] + size[a]),
        });
    }
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = volume.index([origin[0] + z, origin[1] + y, origin[2]]);
            out.extend_from_slice(&volume.voxels()[start..start + size[2]]);
        }
    }
    let vol = Volume::new(volume.id.clone(), size, volume.spacing_mm(), out)?;
    let masks = nodules.iter().map(|n| {
        let w = n.consensus_mask.window(origin, size);
        (BinaryMask::from_bits([0; 3], size, w.bits().to_vec()), n.n_readers)
    });
    Ok((vol, rebuild(masks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_store::render_ellipsoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Volume, Vec<GroundTruthNodule>) {
        let shape = [16, 32, 32];
        let center = [6.0, 10.5, 22.5];
        let mask = render_ellipsoid(shape, center, [3.0; 3]);
        let mut vox = vec![0.0f32; shape.iter().product()];
        for v in mask.voxels() {
            vox[(v[0] * 32 + v[1]) * 32 + v[2]] = 1.0;
        }
        let vol = Volume::new("t", shape, [1.0; 3], vox).unwrap();
        let gt = GroundTruthNodule::from_mask(&mask, 4).unwrap();
        (vol, vec![gt])
    }

    #[test]
    fn flip_twice_is_identity() {
        let (vol, gts) = sample();
        for axes in [[true, false, false], [false, true, true], [true, true, true]] {
            let (a, ga) = flip(&vol, &gts, axes).unwrap();
            assert_ne!(a.voxels(), vol.voxels());
            let (b, gb) = flip(&a, &ga, axes).unwrap();
            assert_eq!(b.voxels(), vol.voxels());
            assert_eq!(gb, gts);
        }
        let (_, g) = flip(&vol, &gts, [false, false, true]).unwrap();
        assert_eq!(g[0].center_vox, [6.0, 10.5, 32.0 - 22.5]);
    }

    #[test]
    fn quarter_turn_moves_nodule_exactly() {
        let (vol, gts) = sample();
        let (r, g) = rotate_z(&vol, &gts, std::f64::consts::FRAC_PI_2).unwrap();
        assert_eq!(g.len(), 1);
        // (y, x) = (10.5, 22.5) about (16, 16): offset (-5.5, 6.5) -> (6.5, 5.5)
        let c = g[0].center_vox;
        assert!((c[0] - 6.0).abs() < 1e-9 && (c[1] - 22.5).abs() < 1e-9 && (c[2] - 21.5).abs() < 1e-9, "{c:?}");
        assert!((g[0].diameter_vox - gts[0].diameter_vox).abs() < 1.0);
        assert_eq!(g[0].consensus_mask.count(), gts[0].consensus_mask.count());
        // intensities follow the mask exactly on a quarter turn
        for v in g[0].consensus_mask.voxels() {
            assert!((r.get(v) - 1.0).abs() < 1e-5);
        }
        let total: f32 = r.voxels().iter().sum();
        assert!((total - gts[0].consensus_mask.count() as f32).abs() < 1e-3);
    }

    #[test]
    fn nodules_rotated_out_of_view_are_dropped() {
        let shape = [8, 32, 32];
        let mask = render_ellipsoid(shape, [4.0, 2.0, 2.0], [1.5; 3]);
        let vol = Volume::new("c", shape, [1.0; 3], vec![0.0; 8 * 32 * 32]).unwrap();
        let gts = vec![GroundTruthNodule::from_mask(&mask, 3).unwrap()];
        let (_, g) = rotate_z(&vol, &gts, std::f64::consts::FRAC_PI_4).unwrap();
        assert!(g.is_empty());
        let (_, g) = crop_sample(&vol, &gts, [0, 8, 8], [8, 16, 16]).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn crop_shifts_coordinates() {
        let (vol, gts) = sample();
        let (c, g) = crop_sample(&vol, &gts, [0, 0, 8], [16, 24, 24]).unwrap();
        assert_eq!(c.shape(), [16, 24, 24]);
        assert_eq!(c.get([6, 10, 14]), vol.get([6, 10, 22]));
        assert_eq!(g[0].center_vox, [6.0, 10.5, 14.5]);
        assert!(crop_sample(&vol, &gts, [1, 0, 0], [16, 8, 8]).is_err());
    }

    #[test]
    fn augment_is_seeded() {
        let (vol, gts) = sample();
        let a = augment(&vol, &gts, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment(&vol, &gts, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.0.voxels(), b.0.voxels());
        assert_eq!(a.1, b.1);
    }
}
