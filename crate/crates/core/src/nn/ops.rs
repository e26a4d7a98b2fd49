//! Elementwise, normalization, reshaping, dense and pooling kernels.

use num_traits::Float;

use super::gemm::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Unbiased variance, for running-average updates.
    pub var_unbiased: Vec<f32>,
}

/// Training-mode batch norm over the spatial axes of a `[C,D,H,W]` map.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, BnStats) {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let stats = par::map(c, |ci| {
        let xs = x.channel(ci);
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
        (mean as f32, (1.0 / (var + BN_EPS as f64).sqrt()) as f32, unbiased as f32)
    });
    let mean: Vec<f32> = stats.iter().map(|s| s.0).collect();
    let inv_std: Vec<f32> = stats.iter().map(|s| s.1).collect();
    let var_unbiased: Vec<f32> = stats.iter().map(|s| s.2).collect();
    let y = affine_channels(x, |ci| {
        let scale = gamma.data()[ci] * inv_std[ci];
        (scale, beta.data()[ci] - mean[ci] * scale)
    });
    (
        y,
        BnStats {
            mean,
            inv_std,
            var_unbiased,
        },
    )
}

/// Evaluation-mode batch norm with running statistics.
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, rmean: &Tensor, rvar: &Tensor) -> Tensor {
    affine_channels(x, |ci| {
        let scale = gamma.data()[ci] / (rvar.data()[ci] + BN_EPS).sqrt();
        (scale, beta.data()[ci] - rmean.data()[ci] * scale)
    })
}

fn affine_channels(x: &Tensor, coef: impl Fn(usize) -> (f32, f32) + Sync + Send) -> Tensor {
    let (_, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut y = x.clone();
    par::for_each_chunk_mut(y.data_mut(), n, |ci, yc| {
        let (a, b) = coef(ci);
        yc.iter_mut().for_each(|v| *v = *v * a + b);
    });
    y
}

/// Backward of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward(x: &Tensor, gamma: &Tensor, stats: &BnStats, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let sums = par::map(c, |ci| {
        let (m, is) = (stats.mean[ci], stats.inv_std[ci]);
        let mut sdy = 0.0f64;
        let mut sdyx = 0.0f64;
        for (&xv, &g) in x.channel(ci).iter().zip(dy.channel(ci)) {
            sdy += g as f64;
            sdyx += (g * (xv - m) * is) as f64;
        }
        (sdy, sdyx)
    });
    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), n, |ci, dxc| {
        let (m, is) = (stats.mean[ci], stats.inv_std[ci]);
        let (sdy, sdyx) = sums[ci];
        let k = gamma.data()[ci] * is / n as f32;
        let (sdy, sdyx) = (sdy as f32, sdyx as f32);
        for ((o, &xv), &g) in dxc.iter_mut().zip(x.channel(ci)).zip(dy.channel(ci)) {
            let xhat = (xv - m) * is;
            *o = k * (n as f32 * g - sdy - xhat * sdyx);
        }
    });
    let dgamma = Tensor::from_vec(&[c], sums.iter().map(|s| s.1 as f32).collect());
    let dbeta = Tensor::from_vec(&[c], sums.iter().map(|s| s.0 as f32).collect());
    (dx, dgamma, dbeta)
}

/// Backward of evaluation-mode batch norm (a fixed per-channel affine map).
pub fn batch_norm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    rmean: &Tensor,
    rvar: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.dims4().0;
    let dx = affine_channels(dy, |ci| (gamma.data()[ci] / (rvar.data()[ci] + BN_EPS).sqrt(), 0.0));
    let sums = par::map(c, |ci| {
        let is = 1.0 / (rvar.data()[ci] + BN_EPS).sqrt();
        let m = rmean.data()[ci];
        let mut sdy = 0.0f64;
        let mut sdyx = 0.0f64;
        for (&xv, &g) in x.channel(ci).iter().zip(dy.channel(ci)) {
            sdy += g as f64;
            sdyx += (g * (xv - m) * is) as f64;
        }
        (sdy as f32, sdyx as f32)
    });
    let dgamma = Tensor::from_vec(&[c], sums.iter().map(|s| s.1).collect());
    let dbeta = Tensor::from_vec(&[c], sums.iter().map(|s| s.0).collect());
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, &v)| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
    dx
}

/// Channel concatenation of `[Ci,D,H,W]` maps sharing spatial dims.
pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    let sp = xs[0].spatial();
    let mut data = Vec::new();
    let mut c = 0;
    for x in xs {
        assert_eq!(x.spatial(), sp, "concat spatial mismatch");
        c += x.dims4().0;
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&[c, sp[0], sp[1], sp[2]], data)
}

/// Spatial crop `origin .. origin + size` of a `[C,D,H,W]` map.
pub fn crop(x: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let (c, d, h, w) = x.dims4();
    for a in 0..3 {
        assert!(origin[a] + size[a] <= [d, h, w][a], "crop out of bounds on axis {a}");
    }
    let mut out = Tensor::zeros(&[c, size[0], size[1], size[2]]);
    let on = size[0] * size[1] * size[2];
    par::for_each_chunk_mut(out.data_mut(), on, |ci, oc| {
        let xc = x.channel(ci);
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let dst = (z * size[1] + y) * size[2];
                oc[dst..dst + size[2]].copy_from_slice(&xc[src..src + size[2]]);
            }
        }
    });
    out
}

pub fn crop_backward(in_shape: &[usize], origin: [usize; 3], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let (_, d, h, w) = dx.dims4();
    let size = dy.spatial();
    par::for_each_chunk_mut(dx.data_mut(), d * h * w, |ci, xc| {
        let gc = dy.channel(ci);
        for z in 0..size[0] {
            for y in 0..size[1] {
                let dst = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let src = (z * size[1] + y) * size[2];
                xc[dst..dst + size[2]].copy_from_slice(&gc[src..src + size[2]]);
            }
        }
    });
    dx
}

/// `x: [n, in]`, `w: [out, in]`, `b: [out]` → `[n, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    assert_eq!(w.shape()[1], fin, "linear input width");
    let mut y = vec![0.0f32; n * fout];
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm(
        MatRef::row_major(x.data(), n, fin),
        MatRef::transposed(w.data(), fout, fin),
        1.0,
        &mut y,
    );
    Tensor::from_vec(&[n, fout], y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, need_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; n * fin];
        gemm(
            MatRef::row_major(dy.data(), n, fout),
            MatRef::row_major(w.data(), fout, fin),
            0.0,
            &mut dx,
        );
        Tensor::from_vec(&[n, fin], dx)
    });
    let mut dw = vec![0.0f32; fout * fin];
    gemm(
        MatRef::transposed(dy.data(), n, fout),
        MatRef::row_major(x.data(), n, fin),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0f32; fout];
    for row in dy.data().chunks(fout) {
        par::add_assign(&mut db, row);
    }
    (dx, Tensor::from_vec(&[fout, fin], dw), Tensor::from_vec(&[fout], db))
}

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per sample.
pub type AxisTaps<F> = Vec<(usize, usize, F, F)>;

/// Sample lattice of an align-style ROI pool along one axis.
///
/// `lo`/`hi` are box bounds in feature-cell units (cell `j` covers `[j, j+1)`).
/// Samples sit at bin centers and are interpolated between cell centers,
/// clamped at the map border.
pub fn roi_axis_taps<F: Float>(lo: F, hi: F, out: usize, len: usize) -> AxisTaps<F> {
    let half = F::from(0.5).unwrap();
    let extent = hi - lo;
    let max = F::from(len - 1).unwrap();
    (0..out)
        .map(|i| {
            let u = lo + (F::from(i).unwrap() + half) * extent / F::from(out).unwrap();
            let t = (u - half).max(F::zero()).min(max);
            let i0 = t.floor();
            let frac = t - i0;
            let i0 = i0.to_usize().unwrap();
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, F::one() - frac, frac)
        })
        .collect()
}

/// Pools a `[C,D,H,W]` map (flattened in `feat`) into `C × out³` values per box.
/// `boxes` are `[lo_z, lo_y, lo_x, hi_z, hi_y, hi_x]` in feature-cell units.
/// The result is `[n, C * out³]`, row-major.
pub fn roi_align_forward<F: Float + Send + Sync>(
    feat: &[F],
    c: usize,
    dims: [usize; 3],
    boxes: &[[F; 6]],
    out: usize,
) -> Vec<F> {
    let [d, h, w] = dims;
    let per_box = c * out * out * out;
    let rows = par::map(boxes.len(), |bi| {
        let b = &boxes[bi];
        let tz = roi_axis_taps(b[0], b[3], out, d);
        let ty = roi_axis_taps(b[1], b[4], out, h);
        let tx = roi_axis_taps(b[2], b[5], out, w);
        let mut row = vec![F::zero(); per_box];
        for ci in 0..c {
            let fc = &feat[ci * d * h * w..(ci + 1) * d * h * w];
            for (a, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                for (bb, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (e, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let at = |z: usize, y: usize, x: usize| fc[(z * h + y) * w + x];
                        let v = wz0 * (wy0 * (wx0 * at(z0, y0, x0) + wx1 * at(z0, y0, x1))
                            + wy1 * (wx0 * at(z0, y1, x0) + wx1 * at(z0, y1, x1)))
                            + wz1 * (wy0 * (wx0 * at(z1, y0, x0) + wx1 * at(z1, y0, x1))
                                + wy1 * (wx0 * at(z1, y1, x0) + wx1 * at(z1, y1, x1)));
                        row[((ci * out + a) * out + bb) * out + e] = v;
                    }
                }
            }
        }
        row
    });
    rows.concat()
}

/// Gradient of [`roi_align_forward`] with respect to the feature map.
pub fn roi_align_backward<F: Float + Send + Sync>(
    c: usize,
    dims: [usize; 3],
    boxes: &[[F; 6]],
    out: usize,
    dy: &[F],
) -> Vec<F> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let per_box = c * out * out * out;
    let taps: Vec<_> = boxes
        .iter()
        .map(|b| {
            (
                roi_axis_taps(b[0], b[3], out, d),
                roi_axis_taps(b[1], b[4], out, h),
                roi_axis_taps(b[2], b[5], out, w),
            )
        })
        .collect();
    let mut df = vec![F::zero(); c * n];
    par::for_each_chunk_mut(&mut df, n, |ci, dc| {
        for (bi, (tz, ty, tx)) in taps.iter().enumerate() {
            let g = &dy[bi * per_box..(bi + 1) * per_box];
            for (a, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                for (bb, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (e, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = g[((ci * out + a) * out + bb) * out + e];
                        for (z, wz) in [(z0, wz0), (z1, wz1)] {
                            for (y, wy) in [(y0, wy0), (y1, wy1)] {
                                for (x, wx) in [(x0, wx0), (x1, wx1)] {
                                    let idx = (z * h + y) * w + x;
                                    dc[idx] = dc[idx] + gv * wz * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    df
}
