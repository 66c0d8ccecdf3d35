//! Raw forward/backward kernels on flat `(C, D, H, W)` buffers.
//!
//! Convolutions go through im2col and a strided GEMM. The unfolded column
//! buffer is built a few output planes at a time to bound memory.

use super::real::{gemm, Real, Strides};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

pub type Shape4 = [usize; 4];

pub fn numel(s: Shape4) -> usize {
    s.iter().product()
}

pub fn conv_out_shape(x: Shape4, out_channels: usize, k: usize) -> Shape4 {
    [out_channels, x[1] + 1 - k, x[2] + 1 - k, x[3] + 1 - k]
}

fn planes_per_chunk(rows: usize, plane: usize, depth: usize) -> usize {
    (COL_BUDGET / (rows * plane).max(1)).clamp(1, depth)
}

/// Unfolds output planes `[od0, od0 + planes)` into `col` (`C*k^3` rows by `planes*H'*W'` cols).
fn im2col<T: Real>(x: &[T], xs: Shape4, k: usize, od0: usize, planes: usize, col: &mut [T]) {
    let [c, _, h, w] = xs;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let ncols = planes * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst_row = &mut col[row * ncols..(row + 1) * ncols];
                    for p in 0..planes {
                        let d = od0 + p + kd;
                        for y in 0..oh {
                            let src = ((ci * xs[1] + d) * h + y + kh) * w + kw;
                            let dst = (p * oh + y) * ow;
                            dst_row[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im<T: Real>(col: &[T], xs: Shape4, k: usize, od0: usize, planes: usize, dx: &mut [T]) {
    let [c, _, h, w] = xs;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let ncols = planes * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src_row = &col[row * ncols..(row + 1) * ncols];
                    for p in 0..planes {
                        let d = od0 + p + kd;
                        for y in 0..oh {
                            let dst = ((ci * xs[1] + d) * h + y + kh) * w + kw;
                            let src = (p * oh + y) * ow;
                            for (o, &g) in dx[dst..dst + ow].iter_mut().zip(&src_row[src..src + ow]) {
                                *o += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Valid cross-correlation. `weight` is `(O, C, k, k, k)`, `bias` is `(O)`.
pub fn conv3d_forward<T: Real>(x: &[T], xs: Shape4, weight: &[T], out_channels: usize, k: usize, bias: &[T]) -> Vec<T> {
    let ys = conv_out_shape(xs, out_channels, k);
    let [o, od, oh, ow] = ys;
    let rows = xs[0] * k * k * k;
    let plane = oh * ow;
    let out_stride = od * plane;
    let mut y = vec![T::zero(); numel(ys)];
    for (oc, &b) in bias.iter().enumerate() {
        y[oc * out_stride..(oc + 1) * out_stride].fill(b);
    }
    let chunk = planes_per_chunk(rows, plane, od);
    let mut col = vec![T::zero(); rows * chunk * plane];
    let mut d0 = 0;
    while d0 < od {
        let planes = chunk.min(od - d0);
        let ncols = planes * plane;
        im2col(x, xs, k, d0, planes, &mut col[..rows * ncols]);
        gemm(
            o,
            rows,
            ncols,
            weight,
            Strides(rows, 1),
            &col[..rows * ncols],
            Strides(ncols, 1),
            T::one(),
            &mut y[d0 * plane..],
            Strides(out_stride, 1),
        );
        d0 += planes;
    }
    y
}

/// Gradients of [`conv3d_forward`]. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    xs: Shape4,
    weight: &[T],
    out_channels: usize,
    k: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let [o, od, oh, ow] = conv_out_shape(xs, out_channels, k);
    let rows = xs[0] * k * k * k;
    let plane = oh * ow;
    let out_stride = od * plane;
    if let Some(db) = db {
        for (oc, g) in db.iter_mut().enumerate() {
            let s = dy[oc * out_stride..(oc + 1) * out_stride].iter().fold(T::zero(), |a, &b| a + b);
            *g += s;
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let chunk = planes_per_chunk(rows, plane, od);
    let mut col = vec![T::zero(); rows * chunk * plane];
    let mut d0 = 0;
    while d0 < od {
        let planes = chunk.min(od - d0);
        let ncols = planes * plane;
        let dy_chunk = &dy[d0 * plane..];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, xs, k, d0, planes, &mut col[..rows * ncols]);
            // dW[o, r] += dY[o, n] * col[r, n]^T
            gemm(
                o,
                ncols,
                rows,
                dy_chunk,
                Strides(out_stride, 1),
                &col[..rows * ncols],
                Strides(1, ncols),
                T::one(),
                dw,
                Strides(rows, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dCol[r, n] = W[o, r]^T * dY[o, n]
            gemm(
                rows,
                o,
                ncols,
                weight,
                Strides(1, rows),
                dy_chunk,
                Strides(out_stride, 1),
                T::zero(),
                &mut col[..rows * ncols],
                Strides(ncols, 1),
            );
            col2im(&col[..rows * ncols], xs, k, d0, planes, dx);
        }
        d0 += planes;
    }
}

/// Stride-2, kernel-2 transposed convolution. `weight` is `(C, O, 2, 2, 2)`.
pub fn conv_transpose_x2_forward<T: Real>(x: &[T], xs: Shape4, weight: &[T], out_channels: usize, bias: &[T]) -> Vec<T> {
    let [c, d, h, w] = xs;
    let n = d * h * w;
    let o8 = out_channels * 8;
    // Y[(o, a, b, e), (z, y, x)] = W^T X
    let mut cols = vec![T::zero(); o8 * n];
    gemm(o8, c, n, weight, Strides(1, o8), x, Strides(n, 1), T::zero(), &mut cols, Strides(n, 1));
    let ys = [out_channels, 2 * d, 2 * h, 2 * w];
    let mut y = vec![T::zero(); numel(ys)];
    for oc in 0..out_channels {
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let row = &cols[(oc * 8 + tap) * n..(oc * 8 + tap + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let src = (z * h + yy) * w;
                    let dst = ((oc * ys[1] + 2 * z + a) * ys[2] + 2 * yy + b) * ys[3] + e;
                    for xx in 0..w {
                        y[dst + 2 * xx] = row[src + xx] + bias[oc];
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_x2_backward<T: Real>(
    x: &[T],
    xs: Shape4,
    weight: &[T],
    out_channels: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let [c, d, h, w] = xs;
    let n = d * h * w;
    let o8 = out_channels * 8;
    let ys = [out_channels, 2 * d, 2 * h, 2 * w];
    if let Some(db) = db {
        let per = numel(ys) / out_channels;
        for (oc, g) in db.iter_mut().enumerate() {
            *g += dy[oc * per..(oc + 1) * per].iter().fold(T::zero(), |a, &b| a + b);
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut gathered = vec![T::zero(); o8 * n];
    for oc in 0..out_channels {
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let row = &mut gathered[(oc * 8 + tap) * n..(oc * 8 + tap + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let dst = (z * h + yy) * w;
                    let src = ((oc * ys[1] + 2 * z + a) * ys[2] + 2 * yy + b) * ys[3] + e;
                    for xx in 0..w {
                        row[dst + xx] = dy[src + 2 * xx];
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        // dX[c, n] += W[c, o8] * G[o8, n]
        gemm(c, o8, n, weight, Strides(o8, 1), &gathered, Strides(n, 1), T::one(), dx, Strides(n, 1));
    }
    if let Some(dw) = dw {
        // dW[c, o8] += X[c, n] * G[o8, n]^T
        gemm(c, n, o8, x, Strides(n, 1), &gathered, Strides(1, n), T::one(), dw, Strides(o8, 1));
    }
}

/// 2x2x2 max pooling. Returns the pooled values and, per output voxel, the
/// flat input index of the winner (first in scan order on ties).
pub fn maxpool_forward<T: Real>(x: &[T], xs: Shape4) -> (Vec<T>, Vec<u32>) {
    let [c, d, h, w] = xs;
    let (pd, ph, pw) = (d / 2, h / 2, w / 2);
    let mut y = Vec::with_capacity(c * pd * ph * pw);
    let mut arg = Vec::with_capacity(y.capacity());
    for ci in 0..c {
        for z in 0..pd {
            for yy in 0..ph {
                for xx in 0..pw {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    let mut first = true;
                    for a in 0..2 {
                        for b in 0..2 {
                            let base = ((ci * d + 2 * z + a) * h + 2 * yy + b) * w + 2 * xx;
                            for e in 0..2 {
                                let v = x[base + e];
                                if first || v > best {
                                    best = v;
                                    best_i = base + e;
                                    first = false;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (y, arg)
}

/// Copies the spatial box at `origin` with extent of `dst_shape` from `src`
/// into channels starting at `channel_offset` of `dst`.
pub fn copy_box<T: Real>(src: &[T], ss: Shape4, origin: [usize; 3], dst: &mut [T], ds: Shape4, channel_offset: usize) {
    let [_, d, h, w] = ds;
    for ci in 0..ss[0] {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * ss[1] + origin[0] + z) * ss[2] + origin[1] + y) * ss[3] + origin[2];
                let t = (((channel_offset + ci) * d + z) * h + y) * w;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
}

/// Adjoint of [`copy_box`].
pub fn add_box<T: Real>(dsrc: &mut [T], ss: Shape4, origin: [usize; 3], ddst: &[T], ds: Shape4, channel_offset: usize) {
    let [_, d, h, w] = ds;
    for ci in 0..ss[0] {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * ss[1] + origin[0] + z) * ss[2] + origin[1] + y) * ss[3] + origin[2];
                let t = (((channel_offset + ci) * d + z) * h + y) * w;
                for (a, &g) in dsrc[s..s + w].iter_mut().zip(&ddst[t..t + w]) {
                    *a += g;
                }
            }
        }
    }
}
