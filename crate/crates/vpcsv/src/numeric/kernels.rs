//! Dense f32 compute kernels. Every reduction (dot products, convolution
//! windows, norms, losses) accumulates in f64; outputs are stored as f32.
//! All kernels are single-threaded with a fixed evaluation order, so results
//! are bit-reproducible.

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj as f64;
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, &v) in acc.iter().enumerate() {
            orow[j] = v as f32;
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T.
///
/// Transposes B into a scratch buffer and reuses the row-broadcast `matmul`
/// loop: per-output dot products defeat vectorization, while the transposed
/// form keeps the f64 accumulators independent across the output row.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        for (kk, &v) in brow.iter().enumerate() {
            bt[kk * n + j] = v;
        }
    }
    matmul(a, &bt, m, k, n, out);
}

/// C[k,n] = A[m,k]^T * B[m,n], accumulated in f64 and ADDED into `out`
/// (which must be an f64 scratch of the right size).
pub fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (j, &bij) in brow.iter().enumerate() {
                orow[j] += aik * bij as f64;
            }
        }
    }
}

pub fn add_f64_into_f32(acc: &[f64], dst: &mut [f32]) {
    for (d, &a) in dst.iter_mut().zip(acc.iter()) {
        *d += a as f32;
    }
}

/// Output spatial extent of a strided convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial extent of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Positions `o` in [0, limit_out) whose affine image i = o·stride + k_off − pad
/// lands inside [0, limit_in); returns the inclusive (lo, hi) band, or None
/// when empty. Hoisting this band out of the spatial loops removes all
/// per-element padding checks.
#[inline]
fn kernel_band(
    k_off: usize,
    pad: usize,
    stride: usize,
    limit_in: usize,
    limit_out: usize,
) -> Option<(usize, usize)> {
    debug_assert!(limit_out >= 1);
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let max_i = limit_in - 1 + pad;
    if max_i < k_off {
        return None;
    }
    let hi = ((max_i - k_off) / stride).min(limit_out - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// acc[j] += wv · x[x0 + j·stride]  (contiguous write, strided read).
#[inline]
fn axpy_gather(acc: &mut [f64], x: &[f32], x0: usize, stride: usize, wv: f64) {
    if stride == 1 {
        let xs = &x[x0..x0 + acc.len()];
        for (o, &xv) in acc.iter_mut().zip(xs) {
            *o += wv * xv as f64;
        }
    } else {
        let span = (acc.len() - 1) * stride + 1;
        for (o, &xv) in acc.iter_mut().zip(x[x0..x0 + span].iter().step_by(stride)) {
            *o += wv * xv as f64;
        }
    }
}

/// dst[d0 + j·stride] += wv · g[j]  (strided write, contiguous read).
#[inline]
fn axpy_scatter(dst: &mut [f64], d0: usize, stride: usize, g: &[f32], wv: f64) {
    if stride == 1 {
        for (o, &gv) in dst[d0..d0 + g.len()].iter_mut().zip(g) {
            *o += wv * gv as f64;
        }
    } else {
        let span = (g.len() - 1) * stride + 1;
        for (o, &gv) in dst[d0..d0 + span].iter_mut().step_by(stride).zip(g) {
            *o += wv * gv as f64;
        }
    }
}

/// Σ_j g[j] · x[x0 + j·stride].
#[inline]
fn dot_strided(g: &[f32], x: &[f32], x0: usize, stride: usize) -> f64 {
    let mut acc = 0.0f64;
    if stride == 1 {
        for (&gv, &xv) in g.iter().zip(&x[x0..x0 + g.len()]) {
            acc += gv as f64 * xv as f64;
        }
    } else {
        let span = (g.len() - 1) * stride + 1;
        for (&gv, &xv) in g.iter().zip(x[x0..x0 + span].iter().step_by(stride)) {
            acc += gv as f64 * xv as f64;
        }
    }
    acc
}

/// out[co,oy,ox] = sum_{ci,ky,kx} x[ci, oy*s+ky-p, ox*s+kx-p] * w[co,ci,ky,kx]
/// x: [ci,h,w] row-major, w: [co,ci,kh,kw], out: [co,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    w: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f32],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(out.len(), co * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];
    for c_out in 0..co {
        acc.fill(0.0);
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            let wbase = (c_out * ci + c_in) * kh * kw;
            for ky in 0..kh {
                let Some((oy_lo, oy_hi)) = kernel_band(ky, pad, stride, h, oh) else { continue };
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = kernel_band(kx, pad, stride, wd, ow) else {
                        continue;
                    };
                    let count = ox_hi - ox_lo + 1;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let x0 = xbase + iy * wd + ox_lo * stride + kx - pad;
                        let arow = &mut acc[oy * ow + ox_lo..oy * ow + ox_lo + count];
                        axpy_gather(arow, x, x0, stride, wv);
                    }
                }
            }
        }
        for (o, &a) in out[c_out * oh * ow..(c_out + 1) * oh * ow].iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
    }
}

/// Gradient of conv2d wrt input, added into f64 scratch `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    dout: &[f32],
    w: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(dx.len(), ci * h * wd);
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            let wbase = (c_out * ci + c_in) * kh * kw;
            for ky in 0..kh {
                let Some((oy_lo, oy_hi)) = kernel_band(ky, pad, stride, h, oh) else { continue };
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = kernel_band(kx, pad, stride, wd, ow) else {
                        continue;
                    };
                    let count = ox_hi - ox_lo + 1;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let d0 = xbase + iy * wd + ox_lo * stride + kx - pad;
                        let grow = &dout[obase + oy * ow + ox_lo..obase + oy * ow + ox_lo + count];
                        axpy_scatter(dx, d0, stride, grow, wv);
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d wrt weights, added into f64 scratch `dw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_weight(
    dout: &[f32],
    x: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(dw.len(), co * ci * kh * kw);
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            let wbase = (c_out * ci + c_in) * kh * kw;
            for ky in 0..kh {
                let Some((oy_lo, oy_hi)) = kernel_band(ky, pad, stride, h, oh) else { continue };
                for kx in 0..kw {
                    let Some((ox_lo, ox_hi)) = kernel_band(kx, pad, stride, wd, ow) else {
                        continue;
                    };
                    let count = ox_hi - ox_lo + 1;
                    let mut acc = 0.0f64;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let x0 = xbase + iy * wd + ox_lo * stride + kx - pad;
                        let grow = &dout[obase + oy * ow + ox_lo..obase + oy * ow + ox_lo + count];
                        acc += dot_strided(grow, x, x0, stride);
                    }
                    dw[wbase + ky * kw + kx] += acc;
                }
            }
        }
    }
}

/// Transposed convolution. x: [ci,h,w], w: [ci,co,kh,kw], out: [co,oh,ow]
/// with oh = (h-1)*s + kh - 2p.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose(
    x: &[f32],
    w: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f32],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(out.len(), co * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];
    for c_out in 0..co {
        acc.fill(0.0);
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            let wbase = (c_in * co + c_out) * kh * kw;
            for ky in 0..kh {
                let Some((iy_lo, iy_hi)) = kernel_band(ky, pad, stride, oh, h) else { continue };
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ix_lo, ix_hi)) = kernel_band(kx, pad, stride, ow, wd) else {
                        continue;
                    };
                    let count = ix_hi - ix_lo + 1;
                    for iy in iy_lo..=iy_hi {
                        let oy = iy * stride + ky - pad;
                        let d0 = oy * ow + ix_lo * stride + kx - pad;
                        let xrow = &x[xbase + iy * wd + ix_lo..xbase + iy * wd + ix_lo + count];
                        axpy_scatter(&mut acc, d0, stride, xrow, wv);
                    }
                }
            }
        }
        for (o, &a) in out[c_out * oh * ow..(c_out + 1) * oh * ow].iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
    }
}

/// Gradient of conv2d_transpose wrt input: a plain gather, added into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose_grad_input(
    dout: &[f32],
    w: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(dx.len(), ci * h * wd);
    for c_in in 0..ci {
        let xbase = c_in * h * wd;
        for c_out in 0..co {
            let obase = c_out * oh * ow;
            let wbase = (c_in * co + c_out) * kh * kw;
            for ky in 0..kh {
                let Some((iy_lo, iy_hi)) = kernel_band(ky, pad, stride, oh, h) else { continue };
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ix_lo, ix_hi)) = kernel_band(kx, pad, stride, ow, wd) else {
                        continue;
                    };
                    let count = ix_hi - ix_lo + 1;
                    for iy in iy_lo..=iy_hi {
                        let oy = iy * stride + ky - pad;
                        let g0 = obase + oy * ow + ix_lo * stride + kx - pad;
                        let drow = &mut dx[xbase + iy * wd + ix_lo..xbase + iy * wd + ix_lo + count];
                        axpy_gather(drow, dout, g0, stride, wv);
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d_transpose wrt weights, added into `dw` ([ci,co,kh,kw]).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose_grad_weight(
    dout: &[f32],
    x: &[f32],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(dw.len(), ci * co * kh * kw);
    for c_in in 0..ci {
        let xbase = c_in * h * wd;
        for c_out in 0..co {
            let obase = c_out * oh * ow;
            let wbase = (c_in * co + c_out) * kh * kw;
            for ky in 0..kh {
                let Some((iy_lo, iy_hi)) = kernel_band(ky, pad, stride, oh, h) else { continue };
                for kx in 0..kw {
                    let Some((ix_lo, ix_hi)) = kernel_band(kx, pad, stride, ow, wd) else {
                        continue;
                    };
                    let count = ix_hi - ix_lo + 1;
                    let mut acc = 0.0f64;
                    for iy in iy_lo..=iy_hi {
                        let oy = iy * stride + ky - pad;
                        let g0 = obase + oy * ow + ix_lo * stride + kx - pad;
                        let xrow = &x[xbase + iy * wd + ix_lo..xbase + iy * wd + ix_lo + count];
                        acc += dot_strided(xrow, dout, g0, stride);
                    }
                    dw[wbase + ky * kw + kx] += acc;
                }
            }
        }
    }
}

/// Row-wise softmax over the last axis, numerically stable.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        let or = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            let e = ((v as f64) - max).exp();
            *o = e as f32;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o = (*o as f64 * inv) as f32;
        }
    }
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &v in xr.iter() {
            sum += ((v as f64) - max).exp();
        }
        let lse = max + sum.ln();
        let or = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = ((v as f64) - lse) as f32;
        }
    }
}

pub fn all_finite(xs: &[f32]) -> bool {
    xs.iter().all(|v| v.is_finite())
}
