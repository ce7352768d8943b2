//! Central-finite-difference gradient oracle.
//!
//! Tests pair the f32 tape against an independent f64 re-implementation of
//! the same function: differences are taken on the f64 oracle, so the check
//! is not polluted by single-precision rounding of the forward value.

/// Step size used by the gradient checks.
pub const FD_H: f64 = 1e-3;

/// Numeric gradient of `f` at `x` by central differences.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients. The
/// denominator is clamped at 1e-2 so near-zero coordinates are compared
/// absolutely instead of amplifying noise.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
        })
        .fold(0.0, f64::max)
}

/// Central differences restricted to chosen coordinates (for functions too
/// wide to probe exhaustively). Returns one derivative per entry of `coords`.
pub fn central_diff_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(coords.len());
    let mut probe = x.to_vec();
    for &i in coords {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Central differences at `coords`, discarding coordinates whose probe
/// interval straddles a kink of the piecewise-smooth function. Detection is
/// analytic-blind: on a smooth stretch the h and h/2 estimates agree to
/// O(h²), while a kink inside the interval bends them apart at first order.
/// Returns the surviving coordinates (by position in `coords`) and their
/// full-step estimates.
pub fn central_diff_smooth(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> (Vec<usize>, Vec<f64>) {
    let full = central_diff_at(f, x, coords, h);
    let half = central_diff_at(f, x, coords, h / 2.0);
    let mut kept = Vec::new();
    let mut est = Vec::new();
    for (j, (&a, &b)) in full.iter().zip(&half).enumerate() {
        let scale = a.abs().max(b.abs()).max(1e-2);
        if ((a - b) / scale).abs() < 1e-4 {
            kept.push(j);
            est.push(a);
        }
    }
    (kept, est)
}

/// Convenience: widen an f32 slice for oracle input.
pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// f64 reference convolution (same layout/convention as `kernels::conv2d`),
/// used as an oracle by model gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_f64(
    x: &[f64],
    w: &[f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x[c * h * wd + iy as usize * wd + ix as usize]
                                * w[((o * ci + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// f64 reference transposed convolution (layout of `kernels::conv2d_transpose`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose_f64(
    x: &[f64],
    w: &[f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; co * oh * ow];
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let v = x[c * h * wd + iy * wd + ix];
                for o in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            out[(o * oh + oy as usize) * ow + ox as usize]
                                += v * w[((c * co + o) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    out
}
