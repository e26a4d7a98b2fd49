//! 3D convolution kernels (im2col + GEMM, parallel over depth slabs).
//!
//! Slab boundaries depend only on tensor shapes, and per-slab partial
//! gradients are accumulated in slab order, so results are bit-identical for
//! any thread count.

use super::gemm::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per slab.
const COL_BUDGET: usize = 1 << 20;

pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Self {
        let (cin, d, h, wd) = x.dims4();
        let ws = w.shape();
        assert_eq!(ws.len(), 5, "conv weight must be [Cout,Cin,k,k,k]");
        assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
        let k = ws[2];
        let out = [d, h, wd].map(|n| {
            conv_out_len(n, k, stride, pad).expect("kernel larger than padded input")
        });
        Self {
            cin,
            inp: [d, h, wd],
            out,
            k,
            stride,
            pad,
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    /// Output-depth slabs `[z0, z1)`.
    fn slabs(&self) -> Vec<(usize, usize)> {
        let per = (COL_BUDGET / (self.kdim() * self.plane()).max(1)).max(1);
        (0..self.out[0])
            .step_by(per)
            .map(|z0| (z0, (z0 + per).min(self.out[0])))
            .collect()
    }

    /// Input-depth range touched by output slab `[z0, z1)`.
    fn input_range(&self, z0: usize, z1: usize) -> (usize, usize) {
        let lo = (z0 * self.stride).saturating_sub(self.pad);
        let hi = ((z1 - 1) * self.stride + self.k)
            .saturating_sub(self.pad)
            .min(self.inp[0]);
        (lo, hi)
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + kk - pad < in_len
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > kk {
        ((in_len + pad - kk - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &Geom, z0: usize, z1: usize) -> Vec<f32> {
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ncols = (z1 - z0) * ho * wo;
    let mut col = vec![0.0f32; g.kdim() * ncols];
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, ky, s, p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let iz = iz as usize;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let base = ((oz - z0) * ho + oy) * wo;
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                dst[base + ox0..base + ox1]
                                    .copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                            } else {
                                for ox in ox0..ox1 {
                                    dst[base + ox] = src[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds `col` back into an input-shaped buffer covering depths `[zin0, zin1)`.
fn col2im(col: &[f32], g: &Geom, z0: usize, z1: usize, zin0: usize, zin1: usize) -> Vec<f32> {
    let [_, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let nz = zin1 - zin0;
    let ncols = (z1 - z0) * ho * wo;
    let mut out = vec![0.0f32; g.cin * nz * h * w];
    for ci in 0..g.cin {
        let oc = &mut out[ci * nz * h * w..(ci + 1) * nz * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, ky, s, p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < zin0 as isize || iz >= zin1 as isize {
                            continue;
                        }
                        let iz = iz as usize - zin0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let dst = &mut oc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let base = ((oz - z0) * ho + oy) * wo;
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                for (dv, sv) in dst[ix0..ix0 + (ox1 - ox0)]
                                    .iter_mut()
                                    .zip(&src[base + ox0..base + ox1])
                                {
                                    *dv += *sv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    dst[ox * s + kx - p] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x: [Cin,D,H,W]`, `w: [Cout,Cin,k,k,k]`, `b: [Cout]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let g = Geom::new(x, w, stride, pad);
    let cout = w.shape()[0];
    let kdim = g.kdim();
    let plane = g.plane();
    let slabs = g.slabs();
    let parts = par::map(slabs.len(), |si| {
        let (z0, z1) = slabs[si];
        let col = im2col(x.data(), &g, z0, z1);
        let n = (z1 - z0) * plane;
        let mut out = vec![0.0f32; cout * n];
        gemm(
            MatRef::row_major(w.data(), cout, kdim),
            MatRef::row_major(&col, kdim, n),
            0.0,
            &mut out,
        );
        out
    });
    let spatial = g.out[0] * plane;
    let mut y = Tensor::zeros(&[cout, g.out[0], g.out[1], g.out[2]]);
    let yd = y.data_mut();
    for ((z0, z1), part) in slabs.iter().zip(&parts) {
        let n = (z1 - z0) * plane;
        for co in 0..cout {
            yd[co * spatial + z0 * plane..co * spatial + z1 * plane]
                .copy_from_slice(&part[co * n..(co + 1) * n]);
        }
    }
    if let Some(b) = b {
        for (co, chunk) in yd.chunks_mut(spatial).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

/// Gradients of [`conv3d_forward`]: `(dx, dw, db)`; `dx` only when requested.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let g = Geom::new(x, w, stride, pad);
    let cout = w.shape()[0];
    let kdim = g.kdim();
    let plane = g.plane();
    let spatial = g.out[0] * plane;
    assert_eq!(dy.shape(), &[cout, g.out[0], g.out[1], g.out[2]], "dy shape");
    let slabs = g.slabs();
    let parts = par::map(slabs.len(), |si| {
        let (z0, z1) = slabs[si];
        let n = (z1 - z0) * plane;
        let mut dys = vec![0.0f32; cout * n];
        for co in 0..cout {
            dys[co * n..(co + 1) * n]
                .copy_from_slice(&dy.data()[co * spatial + z0 * plane..co * spatial + z1 * plane]);
        }
        let col = im2col(x.data(), &g, z0, z1);
        let mut dw = vec![0.0f32; cout * kdim];
        gemm(
            MatRef::row_major(&dys, cout, n),
            MatRef::transposed(&col, kdim, n),
            0.0,
            &mut dw,
        );
        let dx = need_dx.then(|| {
            let mut dcol = col;
            gemm(
                MatRef::transposed(w.data(), cout, kdim),
                MatRef::row_major(&dys, cout, n),
                0.0,
                &mut dcol,
            );
            let (zi0, zi1) = g.input_range(z0, z1);
            (zi0, zi1, col2im(&dcol, &g, z0, z1, zi0, zi1))
        });
        (dw, dx)
    });

    let mut dw = vec![0.0f32; cout * kdim];
    let [d, h, wd] = g.inp;
    let mut dx = need_dx.then(|| Tensor::zeros(&[g.cin, d, h, wd]));
    for (dw_part, dx_part) in &parts {
        par::add_assign(&mut dw, dw_part);
        if let (Some(dx), Some((zi0, zi1, buf))) = (dx.as_mut(), dx_part) {
            let nz = zi1 - zi0;
            let dxd = dx.data_mut();
            for ci in 0..g.cin {
                let dst = &mut dxd[ci * d * h * wd + zi0 * h * wd..ci * d * h * wd + zi1 * h * wd];
                par::add_assign(dst, &buf[ci * nz * h * wd..(ci + 1) * nz * h * wd]);
            }
        }
    }
    let db: Vec<f32> = dy
        .data()
        .chunks(spatial)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[cout], db))
}

/// Transposed convolution with kernel 2 and stride 2 (exact ×2 upsampling).
/// `x: [Cin,D,H,W]`, `w: [Cin,Cout,2,2,2]` → `[Cout,2D,2H,2W]`.
pub fn conv_transpose2_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (cin, d, h, wd) = x.dims4();
    let ws = w.shape();
    assert_eq!(ws, &[cin, ws[1], 2, 2, 2], "transposed conv weight must be [Cin,Cout,2,2,2]");
    let cout = ws[1];
    let n = d * h * wd;
    let rows = cout * 8;
    let mut ycol = vec![0.0f32; rows * n];
    gemm(
        MatRef::transposed(w.data(), cin, rows),
        MatRef::row_major(x.data(), cin, n),
        0.0,
        &mut ycol,
    );
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut y = Tensor::zeros(&[cout, od, oh, ow]);
    par::for_each_chunk_mut(y.data_mut(), od * oh * ow, |co, yc| {
        let bias = b.map_or(0.0, |b| b.data()[co]);
        for tap in 0..8 {
            let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &ycol[(co * 8 + tap) * n..(co * 8 + tap + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let row = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                    let s = &src[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                    for (xx, v) in s.iter().enumerate() {
                        yc[row + 2 * xx] = *v + bias;
                    }
                }
            }
        }
    });
    y
}

pub fn conv_transpose2_backward(x: &Tensor, w: &Tensor, dy: &Tensor, need_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, d, h, wd) = x.dims4();
    let cout = w.shape()[1];
    let n = d * h * wd;
    let rows = cout * 8;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    assert_eq!(dy.shape(), &[cout, od, oh, ow], "dy shape");
    let mut dycol = vec![0.0f32; rows * n];
    par::for_each_chunk_mut(&mut dycol, 8 * n, |co, dc| {
        let dyc = dy.channel(co);
        for tap in 0..8 {
            let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut dc[tap * n..(tap + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let row = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                    for xx in 0..wd {
                        dst[(z * h + yy) * wd + xx] = dyc[row + 2 * xx];
                    }
                }
            }
        }
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; cin * n];
        gemm(
            MatRef::row_major(w.data(), cin, rows),
            MatRef::row_major(&dycol, rows, n),
            0.0,
            &mut dx,
        );
        Tensor::from_vec(&[cin, d, h, wd], dx)
    });
    let mut dw = vec![0.0f32; cin * rows];
    gemm(
        MatRef::row_major(x.data(), cin, n),
        MatRef::transposed(&dycol, rows, n),
        0.0,
        &mut dw,
    );
    let db: Vec<f32> = dy
        .data()
        .chunks(od * oh * ow)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[cout], db))
}
