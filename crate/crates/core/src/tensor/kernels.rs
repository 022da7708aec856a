//! Raw forward/backward kernels on flat buffers. Shape validation happens in
//! the tape; everything here assumes consistent sizes.

use std::ops::Range;

use crate::scalar::{matmul, matmul_into, MatRef, Scalar};

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input already is the patch matrix.
    pub fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds output rows `rows` of one batch item `(cin, h, w)` into a
/// `(cin*kh*kw, rows.len()*ow)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, rows: Range<usize>, cols: &mut [T]) {
    let width = rows.len() * g.ow;
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for (r, oy) in rows.clone().enumerate() {
                    let out_row = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.w, g.ow);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose stride-1 input column `ox + kx - pad` is in range.
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = ((w + pad) as isize - kx as isize).clamp(0, ow as isize) as usize;
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, rows: Range<usize>, dx: &mut [T]) {
    let width = rows.len() * g.ow;
    for ci in 0..g.cin {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * width..(row + 1) * width];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &src[r * g.ow..(r + 1) * g.ow];
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.w, g.ow);
                        if lo < hi {
                            let start = lo + kx - g.pad;
                            for (d, s) in dst_row[start..start + (hi - lo)]
                                .iter_mut()
                                .zip(&in_row[lo..hi])
                            {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in in_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bytes of patch matrix processed per gemm call; sized to stay in cache.
const TILE_BYTES: usize = 256 * 1024;

/// Output-row tiles of a convolution.
fn row_tiles<T>(g: &ConvGeom) -> impl Iterator<Item = Range<usize>> {
    let per_row = g.patch() * g.ow * std::mem::size_of::<T>();
    let step = (TILE_BYTES / per_row.max(1)).clamp(1, g.oh.max(1));
    let oh = g.oh;
    (0..oh).step_by(step).map(move |r| r..(r + step).min(oh))
}

fn ensure_len<T: Scalar>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

/// Forward convolution over a batch; `scratch` holds one patch-matrix tile.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    batch: usize,
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.cout * plane;
    let mut out = vec![T::zero(); batch * out_len];
    let wm = MatRef::new(weight, g.cout, g.patch());
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (c, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.fill(b[c]);
            }
        }
        if g.pointwise() {
            matmul(wm, MatRef::new(xn, g.cin, plane), beta, on);
            continue;
        }
        for rows in row_tiles::<T>(g) {
            let width = rows.len() * g.ow;
            ensure_len(scratch, g.patch() * width);
            let cols = &mut scratch[..g.patch() * width];
            im2col(xn, g, rows.clone(), cols);
            let off = rows.start * g.ow;
            matmul_into(
                wm,
                MatRef::new(cols, g.patch(), width),
                beta,
                &mut on[off..],
                plane,
            );
        }
    }
    out
}

/// Gradients of a convolution; each of `dx`, `dw`, `db` is accumulated only
/// when requested. Patch matrices are rebuilt tile by tile in `scratch`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    batch: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.cout * plane;
    if let Some(db) = db {
        for n in 0..batch {
            let dn = &dout[n * out_len..(n + 1) * out_len];
            for (c, chunk) in dn.chunks(plane).enumerate() {
                db[c] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    let wt = MatRef::new(weight, g.cout, g.patch()).t();
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dn = &dout[n * out_len..(n + 1) * out_len];
        if g.pointwise() {
            let dm = MatRef::new(dn, g.cout, plane);
            if let Some(dw) = dw.as_deref_mut() {
                matmul(dm, MatRef::new(xn, g.cin, plane).t(), T::one(), dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                matmul(wt, dm, T::one(), &mut dx[n * in_len..(n + 1) * in_len]);
            }
            continue;
        }
        for rows in row_tiles::<T>(g) {
            let width = rows.len() * g.ow;
            let off = rows.start * g.ow;
            let dm = MatRef::strided(&dn[off..], g.cout, width, plane);
            ensure_len(scratch, g.patch() * width);
            let cols = &mut scratch[..g.patch() * width];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(xn, g, rows.clone(), cols);
                matmul(dm, MatRef::new(cols, g.patch(), width).t(), T::one(), dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                matmul(wt, dm, T::zero(), cols);
                col2im_add(cols, g, rows, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_moments<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            q += x[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / count;
    }
    (mean, var)
}
