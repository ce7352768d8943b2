//! Forward ops and their backward rules.
//!
//! Shape errors are rejected up front with the op name and the offending
//! shapes. Backward closures capture `Rc` clones of whatever forward data
//! they need, so they stay valid for the lifetime of the tape.

use std::rc::Rc;

use super::kernels;
use super::tape::{accumulate, accumulate_f64, GradStore, Tape, Value};
use super::NumericError;

fn shape_err(op: &'static str, details: String) -> NumericError {
    NumericError::ShapeMismatch { op, details }
}

fn same_shape(op: &'static str, a: &Value, b: &Value) -> Result<(), NumericError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Rows/cols split for ops that act on the last axis.
fn last_axis(op: &'static str, v: &Value) -> Result<(usize, usize), NumericError> {
    match v.shape().last() {
        Some(&cols) if cols > 0 => Ok((v.numel() / cols, cols)),
        _ => Err(shape_err(op, format!("no last axis in {:?}", v.shape()))),
    }
}

impl Tape {
    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        same_shape("add", a, b)?;
        let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ia, ib, n) = (a.id(), b.id(), a.numel());
        let (ta, tb) = (a.tracked, b.tracked);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta || tb,
            Some(Box::new(move |up: &[f32], gs: &mut GradStore| {
                if ta {
                    accumulate(gs, ia, n, up);
                }
                if tb {
                    accumulate(gs, ib, n, up);
                }
            })),
        ))
    }

    pub fn sub(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        same_shape("sub", a, b)?;
        let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ia, ib, n) = (a.id(), b.id(), a.numel());
        let (ta, tb) = (a.tracked, b.tracked);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta || tb,
            Some(Box::new(move |up, gs| {
                if ta {
                    accumulate(gs, ia, n, up);
                }
                if tb {
                    let slot = gs.slot(ib, n);
                    for (s, &u) in slot.iter_mut().zip(up) {
                        *s -= u;
                    }
                }
            })),
        ))
    }

    pub fn mul(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        same_shape("mul", a, b)?;
        let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ia, ib, n) = (a.id(), b.id(), a.numel());
        let (ta, tb) = (a.tracked, b.tracked);
        let (da, db) = (Rc::clone(&a.data), Rc::clone(&b.data));
        Ok(self.push(
            a.shape.clone(),
            data,
            ta || tb,
            Some(Box::new(move |up, gs| {
                if ta {
                    let slot = gs.slot(ia, n);
                    for i in 0..n {
                        slot[i] += up[i] * db[i];
                    }
                }
                if tb {
                    let slot = gs.slot(ib, n);
                    for i in 0..n {
                        slot[i] += up[i] * da[i];
                    }
                }
            })),
        ))
    }

    pub fn scale(&mut self, a: &Value, c: f32) -> Result<Value, NumericError> {
        let data: Vec<f32> = a.data().iter().map(|x| x * c).collect();
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, n);
                for (s, &u) in slot.iter_mut().zip(up) {
                    *s += u * c;
                }
            })),
        ))
    }

    /// c - a, elementwise.
    pub fn sub_from_scalar(&mut self, c: f32, a: &Value) -> Result<Value, NumericError> {
        let data: Vec<f32> = a.data().iter().map(|x| c - x).collect();
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, n);
                for (s, &u) in slot.iter_mut().zip(up) {
                    *s -= u;
                }
            })),
        ))
    }

    pub fn relu(&mut self, a: &Value) -> Result<Value, NumericError> {
        let data: Vec<f32> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        let src = Rc::clone(&a.data);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, n);
                for i in 0..n {
                    if src[i] > 0.0 {
                        slot[i] += up[i];
                    }
                }
            })),
        ))
    }

    pub fn sigmoid(&mut self, a: &Value) -> Result<Value, NumericError> {
        let data: Vec<f32> = a
            .data()
            .iter()
            .map(|&x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32)
            .collect();
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        let out = Rc::new(data.clone());
        let saved = Rc::clone(&out);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, n);
                for i in 0..n {
                    let y = saved[i];
                    slot[i] += up[i] * y * (1.0 - y);
                }
            })),
        ))
    }

    /// ln(max(x, floor)). Clamped inputs get zero gradient.
    pub fn log_clamped(&mut self, a: &Value, floor: f32) -> Result<Value, NumericError> {
        let data: Vec<f32> = a.data().iter().map(|&x| x.max(floor).ln()).collect();
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        let src = Rc::clone(&a.data);
        Ok(self.push(
            a.shape.clone(),
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, n);
                for i in 0..n {
                    if src[i] > floor {
                        slot[i] += up[i] / src[i];
                    }
                }
            })),
        ))
    }

    // ── gradient plumbing ───────────────────────────────────────────

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: &Value) -> Value {
        Value {
            id: self.fresh_id(),
            shape: a.shape.clone(),
            data: Rc::clone(&a.data),
            tracked: false,
        }
    }

    /// Forward value of `quantized`; the backward pass hands the upstream
    /// gradient to `passthrough` unchanged and nothing to `quantized`.
    pub fn straight_through(
        &mut self,
        quantized: &Value,
        passthrough: &Value,
    ) -> Result<Value, NumericError> {
        same_shape("straight_through", quantized, passthrough)?;
        let (ip, n, tp) = (passthrough.id(), passthrough.numel(), passthrough.tracked);
        let data = quantized.data().to_vec();
        Ok(self.push(
            quantized.shape.clone(),
            data,
            tp,
            Some(Box::new(move |up, gs| {
                accumulate(gs, ip, n, up);
            })),
        ))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: &Value, shape: &[usize]) -> Result<Value, NumericError> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", a.shape(), shape),
            ));
        }
        let (ia, n, ta) = (a.id(), a.numel(), a.tracked);
        Ok(self.push_shared(
            shape.to_vec(),
            Rc::clone(&a.data),
            ta,
            Some(Box::new(move |up: &[f32], gs: &mut GradStore| {
                accumulate(gs, ia, n, up);
            })),
        ))
    }

    pub fn flatten(&mut self, a: &Value) -> Result<Value, NumericError> {
        let n = a.numel();
        self.reshape(a, &[n])
    }

    /// Concatenate rank-2 values along the last axis.
    pub fn concat_last(&mut self, parts: &[&Value]) -> Result<Value, NumericError> {
        if parts.is_empty() {
            return Err(shape_err("concat_last", "empty input list".into()));
        }
        let rows = parts[0].shape().first().copied().unwrap_or(0);
        for p in parts {
            if p.shape().len() != 2 || p.shape()[0] != rows {
                return Err(shape_err(
                    "concat_last",
                    format!("expected [{rows}, _], got {:?}", p.shape()),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let meta: Vec<(usize, usize, bool)> = parts
            .iter()
            .map(|p| (p.id(), p.shape()[1], p.tracked))
            .collect();
        let tracked = parts.iter().any(|p| p.tracked);
        Ok(self.push(
            vec![rows, total],
            data,
            tracked,
            Some(Box::new(move |up, gs| {
                let mut offset = 0;
                for &(id, w, t) in &meta {
                    if t {
                        let slot = gs.slot(id, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                slot[r * w + c] += up[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            })),
        ))
    }

    /// Column slice [start, start+len) of a rank-2 value.
    pub fn slice_last(
        &mut self,
        a: &Value,
        start: usize,
        len: usize,
    ) -> Result<Value, NumericError> {
        if a.shape().len() != 2 || start + len > a.shape()[1] {
            return Err(shape_err(
                "slice_last",
                format!("cols {start}..{} of {:?}", start + len, a.shape()),
            ));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0f32; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        let (ia, ta) = (a.id(), a.tracked);
        Ok(self.push(
            vec![rows, len],
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, rows * cols);
                for r in 0..rows {
                    for c in 0..len {
                        slot[r * cols + start + c] += up[r * len + c];
                    }
                }
            })),
        ))
    }

    /// [C,H,W] -> [H*W, C]: one row of codebook-dimension features per cell.
    pub fn cells_from_chw(&mut self, a: &Value) -> Result<Value, NumericError> {
        if a.shape().len() != 3 {
            return Err(shape_err("cells_from_chw", format!("{:?}", a.shape())));
        }
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let hw = h * w;
        let mut data = vec![0.0f32; hw * c];
        for ch in 0..c {
            for cell in 0..hw {
                data[cell * c + ch] = a.data()[ch * hw + cell];
            }
        }
        let (ia, ta) = (a.id(), a.tracked);
        Ok(self.push(
            vec![hw, c],
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, c * hw);
                for ch in 0..c {
                    for cell in 0..hw {
                        slot[ch * hw + cell] += up[cell * c + ch];
                    }
                }
            })),
        ))
    }

    /// [H*W, C] -> [C,H,W]; inverse of `cells_from_chw`.
    pub fn chw_from_cells(&mut self, a: &Value, h: usize, w: usize) -> Result<Value, NumericError> {
        if a.shape().len() != 2 || a.shape()[0] != h * w {
            return Err(shape_err(
                "chw_from_cells",
                format!("{:?} for {h}x{w} grid", a.shape()),
            ));
        }
        let (hw, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0f32; c * hw];
        for cell in 0..hw {
            for ch in 0..c {
                data[ch * hw + cell] = a.data()[cell * c + ch];
            }
        }
        let (ia, ta) = (a.id(), a.tracked);
        Ok(self.push(
            vec![c, h, w],
            data,
            ta,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ia, hw * c);
                for cell in 0..hw {
                    for ch in 0..c {
                        slot[cell * c + ch] += up[ch * hw + cell];
                    }
                }
            })),
        ))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0f32; m * n];
        kernels::matmul(a.data(), b.data(), m, k, n, &mut data);
        let (ia, ib) = (a.id(), b.id());
        let (ta, tb) = (a.tracked, b.tracked);
        let (da, db) = (Rc::clone(&a.data), Rc::clone(&b.data));
        Ok(self.push(
            vec![m, n],
            data,
            ta || tb,
            Some(Box::new(move |up, gs| {
                if ta {
                    // dA = dC * B^T
                    let mut tmp = vec![0.0f32; m * k];
                    kernels::matmul_nt(up, &db, m, n, k, &mut tmp);
                    accumulate(gs, ia, m * k, &tmp);
                }
                if tb {
                    // dB = A^T * dC
                    let mut tmp = vec![0.0f64; k * n];
                    kernels::matmul_tn_acc(&da, up, m, k, n, &mut tmp);
                    accumulate_f64(gs, ib, k * n, &tmp);
                }
            })),
        ))
    }

    /// A[m,k] * B[n,k]^T -> [m,n].
    pub fn matmul_nt(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut data = vec![0.0f32; m * n];
        kernels::matmul_nt(a.data(), b.data(), m, k, n, &mut data);
        let (ia, ib) = (a.id(), b.id());
        let (ta, tb) = (a.tracked, b.tracked);
        let (da, db) = (Rc::clone(&a.data), Rc::clone(&b.data));
        Ok(self.push(
            vec![m, n],
            data,
            ta || tb,
            Some(Box::new(move |up, gs| {
                if ta {
                    // dA = dC * B
                    let mut tmp = vec![0.0f32; m * k];
                    kernels::matmul(up, &db, m, n, k, &mut tmp);
                    accumulate(gs, ia, m * k, &tmp);
                }
                if tb {
                    // dB = dC^T * A
                    let mut tmp = vec![0.0f64; n * k];
                    kernels::matmul_tn_acc(up, &da, m, n, k, &mut tmp);
                    accumulate_f64(gs, ib, n * k, &tmp);
                }
            })),
        ))
    }

    /// x[r,c] + broadcast bias[c].
    pub fn row_bias(&mut self, x: &Value, bias: &Value) -> Result<Value, NumericError> {
        if x.shape().len() != 2 || bias.shape() != [x.shape()[1]] {
            return Err(shape_err(
                "row_bias",
                format!("{:?} + {:?}", x.shape(), bias.shape()),
            ));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias.data()[c];
            }
        }
        let (ix, ib) = (x.id(), bias.id());
        let (tx, tb) = (x.tracked, bias.tracked);
        Ok(self.push(
            x.shape.clone(),
            data,
            tx || tb,
            Some(Box::new(move |up, gs| {
                if tx {
                    accumulate(gs, ix, rows * cols, up);
                }
                if tb {
                    let mut acc = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += up[r * cols + c] as f64;
                        }
                    }
                    accumulate_f64(gs, ib, cols, &acc);
                }
            })),
        ))
    }

    /// x[C,H,W] + broadcast bias[C].
    pub fn channel_bias(&mut self, x: &Value, bias: &Value) -> Result<Value, NumericError> {
        if x.shape().len() != 3 || bias.shape() != [x.shape()[0]] {
            return Err(shape_err(
                "channel_bias",
                format!("{:?} + {:?}", x.shape(), bias.shape()),
            ));
        }
        let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        let mut data = x.data().to_vec();
        for ch in 0..c {
            let b = bias.data()[ch];
            for v in data[ch * hw..(ch + 1) * hw].iter_mut() {
                *v += b;
            }
        }
        let (ix, ib) = (x.id(), bias.id());
        let (tx, tb) = (x.tracked, bias.tracked);
        Ok(self.push(
            x.shape.clone(),
            data,
            tx || tb,
            Some(Box::new(move |up, gs| {
                if tx {
                    accumulate(gs, ix, c * hw, up);
                }
                if tb {
                    let mut acc = vec![0.0f64; c];
                    for ch in 0..c {
                        for i in 0..hw {
                            acc[ch] += up[ch * hw + i] as f64;
                        }
                    }
                    accumulate_f64(gs, ib, c, &acc);
                }
            })),
        ))
    }

    // ── convolutions ────────────────────────────────────────────────

    /// x[Ci,H,W] (*) w[Co,Ci,kh,kw], stride/pad symmetric in both axes.
    pub fn conv2d(
        &mut self,
        x: &Value,
        w: &Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value, NumericError> {
        if x.shape().len() != 3 || w.shape().len() != 4 || x.shape()[0] != w.shape()[1] {
            return Err(shape_err(
                "conv2d",
                format!("x {:?}, w {:?}", x.shape(), w.shape()),
            ));
        }
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"),
            ));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(wd, kw, stride, pad);
        let mut data = vec![0.0f32; co * oh * ow];
        kernels::conv2d(x.data(), w.data(), ci, h, wd, co, kh, kw, stride, pad, &mut data);
        let (ix, iw) = (x.id(), w.id());
        let (tx, tw) = (x.tracked, w.tracked);
        let (dx, dw) = (Rc::clone(&x.data), Rc::clone(&w.data));
        Ok(self.push(
            vec![co, oh, ow],
            data,
            tx || tw,
            Some(Box::new(move |up, gs| {
                if tx {
                    let mut tmp = vec![0.0f64; ci * h * wd];
                    kernels::conv2d_grad_input(up, &dw, ci, h, wd, co, kh, kw, stride, pad, &mut tmp);
                    accumulate_f64(gs, ix, ci * h * wd, &tmp);
                }
                if tw {
                    let mut tmp = vec![0.0f64; co * ci * kh * kw];
                    kernels::conv2d_grad_weight(up, &dx, ci, h, wd, co, kh, kw, stride, pad, &mut tmp);
                    accumulate_f64(gs, iw, co * ci * kh * kw, &tmp);
                }
            })),
        ))
    }

    /// Transposed convolution, w[Ci,Co,kh,kw].
    pub fn conv2d_transpose(
        &mut self,
        x: &Value,
        w: &Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value, NumericError> {
        if x.shape().len() != 3 || w.shape().len() != 4 || x.shape()[0] != w.shape()[0] {
            return Err(shape_err(
                "conv2d_transpose",
                format!("x {:?}, w {:?}", x.shape(), w.shape()),
            ));
        }
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = kernels::conv_transpose_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_transpose_out_dim(wd, kw, stride, pad);
        let mut data = vec![0.0f32; co * oh * ow];
        kernels::conv2d_transpose(x.data(), w.data(), ci, h, wd, co, kh, kw, stride, pad, &mut data);
        let (ix, iw) = (x.id(), w.id());
        let (tx, tw) = (x.tracked, w.tracked);
        let (dx, dw) = (Rc::clone(&x.data), Rc::clone(&w.data));
        Ok(self.push(
            vec![co, oh, ow],
            data,
            tx || tw,
            Some(Box::new(move |up, gs| {
                if tx {
                    let mut tmp = vec![0.0f64; ci * h * wd];
                    kernels::conv2d_transpose_grad_input(
                        up, &dw, ci, h, wd, co, kh, kw, stride, pad, &mut tmp,
                    );
                    accumulate_f64(gs, ix, ci * h * wd, &tmp);
                }
                if tw {
                    let mut tmp = vec![0.0f64; ci * co * kh * kw];
                    kernels::conv2d_transpose_grad_weight(
                        up, &dx, ci, h, wd, co, kh, kw, stride, pad, &mut tmp,
                    );
                    accumulate_f64(gs, iw, ci * co * kh * kw, &tmp);
                }
            })),
        ))
    }

    // ── normalization and activations over the last axis ───────────

    pub fn softmax_last(&mut self, x: &Value) -> Result<Value, NumericError> {
        let (rows, cols) = last_axis("softmax_last", x)?;
        let mut data = vec![0.0f32; x.numel()];
        kernels::softmax_rows(x.data(), rows, cols, &mut data);
        let (ix, tx) = (x.id(), x.tracked);
        let out = Rc::new(data.clone());
        let saved = Rc::clone(&out);
        Ok(self.push(
            x.shape.clone(),
            data,
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, rows * cols);
                for r in 0..rows {
                    let y = &saved[r * cols..(r + 1) * cols];
                    let u = &up[r * cols..(r + 1) * cols];
                    let mut dot = 0.0f64;
                    for c in 0..cols {
                        dot += u[c] as f64 * y[c] as f64;
                    }
                    for c in 0..cols {
                        slot[r * cols + c] += (y[c] as f64 * (u[c] as f64 - dot)) as f32;
                    }
                }
            })),
        ))
    }

    pub fn log_softmax_last(&mut self, x: &Value) -> Result<Value, NumericError> {
        let (rows, cols) = last_axis("log_softmax_last", x)?;
        let mut data = vec![0.0f32; x.numel()];
        kernels::log_softmax_rows(x.data(), rows, cols, &mut data);
        let (ix, tx) = (x.id(), x.tracked);
        let out = Rc::new(data.clone());
        let saved = Rc::clone(&out);
        Ok(self.push(
            x.shape.clone(),
            data,
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, rows * cols);
                for r in 0..rows {
                    let ly = &saved[r * cols..(r + 1) * cols];
                    let u = &up[r * cols..(r + 1) * cols];
                    let mut usum = 0.0f64;
                    for c in 0..cols {
                        usum += u[c] as f64;
                    }
                    for c in 0..cols {
                        let p = (ly[c] as f64).exp();
                        slot[r * cols + c] += (u[c] as f64 - p * usum) as f32;
                    }
                }
            })),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: &Value,
        gain: &Value,
        bias: &Value,
        eps: f32,
    ) -> Result<Value, NumericError> {
        let (rows, cols) = last_axis("layer_norm", x)?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    x.shape(),
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let mut data = vec![0.0f32; x.numel()];
        let mut xhat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = xr
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = istd as f32;
            for c in 0..cols {
                let h = ((xr[c] as f64 - mean) * istd) as f32;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * gain.data()[c] + bias.data()[c];
            }
        }
        let (ix, ig, ib) = (x.id(), gain.id(), bias.id());
        let (tx, tg, tb) = (x.tracked, gain.tracked, bias.tracked);
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gdata = Rc::clone(&gain.data);
        Ok(self.push(
            x.shape.clone(),
            data,
            tx || tg || tb,
            Some(Box::new(move |up, gs| {
                if tg {
                    let mut acc = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += up[r * cols + c] as f64 * xhat[r * cols + c] as f64;
                        }
                    }
                    accumulate_f64(gs, ig, cols, &acc);
                }
                if tb {
                    let mut acc = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += up[r * cols + c] as f64;
                        }
                    }
                    accumulate_f64(gs, ib, cols, &acc);
                }
                if tx {
                    let slot = gs.slot(ix, rows * cols);
                    for r in 0..rows {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for c in 0..cols {
                            let dh = up[r * cols + c] as f64 * gdata[c] as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * cols + c] as f64;
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        let istd = inv_std[r] as f64;
                        for c in 0..cols {
                            let dh = up[r * cols + c] as f64 * gdata[c] as f64;
                            slot[r * cols + c] += (istd
                                * (dh - mean_dh - xhat[r * cols + c] as f64 * mean_dh_h))
                                as f32;
                        }
                    }
                }
            })),
        ))
    }

    // ── lookup, pooling, resampling ─────────────────────────────────

    /// Row gather from table[V,d] by token ids; backward scatter-adds.
    pub fn embedding(&mut self, table: &Value, ids: &[usize]) -> Result<Value, NumericError> {
        if table.shape().len() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", table.shape())));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for table of {v}"),
            ));
        }
        let mut data = vec![0.0f32; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            data[row * d..(row + 1) * d].copy_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let (it, tt) = (table.id(), table.tracked);
        let ids = ids.to_vec();
        let rows = ids.len();
        Ok(self.push(
            vec![rows, d],
            data,
            tt,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(it, v * d);
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        slot[id * d + c] += up[row * d + c];
                    }
                }
            })),
        ))
    }

    /// [C,H,W] -> [C], mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: &Value) -> Result<Value, NumericError> {
        if x.shape().len() != 3 {
            return Err(shape_err("global_avg_pool", format!("{:?}", x.shape())));
        }
        let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        let mut data = vec![0.0f32; c];
        for ch in 0..c {
            let sum: f64 = x.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum();
            data[ch] = (sum / hw as f64) as f32;
        }
        let (ix, tx) = (x.id(), x.tracked);
        Ok(self.push(
            vec![c],
            data,
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, c * hw);
                for ch in 0..c {
                    let g = up[ch] / hw as f32;
                    for i in 0..hw {
                        slot[ch * hw + i] += g;
                    }
                }
            })),
        ))
    }

    /// Nearest-neighbor upsample of [C,H,W] by an integer factor.
    pub fn upsample_nearest(&mut self, x: &Value, factor: usize) -> Result<Value, NumericError> {
        if x.shape().len() != 3 || factor == 0 {
            return Err(shape_err(
                "upsample_nearest",
                format!("{:?} by {factor}", x.shape()),
            ));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[ch * oh * ow + y * ow + xx] =
                        x.data()[ch * h * w + (y / factor) * w + xx / factor];
                }
            }
        }
        let (ix, tx) = (x.id(), x.tracked);
        Ok(self.push(
            vec![c, oh, ow],
            data,
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, c * h * w);
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            slot[ch * h * w + (y / factor) * w + xx / factor] +=
                                up[ch * oh * ow + y * ow + xx];
                        }
                    }
                }
            })),
        ))
    }

    /// Inverted dropout; identity unless the tape is in training mode.
    pub fn dropout(&mut self, x: &Value, rate: f32, rng: &mut super::Rng) -> Value {
        if !self.train || rate <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.numel())
            .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
            .collect();
        let data: Vec<f32> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (ix, n, tx) = (x.id(), x.numel(), x.tracked);
        let mask = Rc::new(mask);
        self.push(
            x.shape.clone(),
            data,
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, n);
                for i in 0..n {
                    slot[i] += up[i] * mask[i];
                }
            })),
        )
    }

    // ── reductions and losses ───────────────────────────────────────

    pub fn sum_all(&mut self, x: &Value) -> Result<Value, NumericError> {
        let total: f64 = x.data().iter().map(|&v| v as f64).sum();
        let (ix, n, tx) = (x.id(), x.numel(), x.tracked);
        Ok(self.push(
            vec![1],
            vec![total as f32],
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, n);
                for s in slot.iter_mut() {
                    *s += up[0];
                }
            })),
        ))
    }

    pub fn mean_all(&mut self, x: &Value) -> Result<Value, NumericError> {
        let n = x.numel();
        if n == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let total: f64 = x.data().iter().map(|&v| v as f64).sum();
        let (ix, tx) = (x.id(), x.tracked);
        Ok(self.push(
            vec![1],
            vec![(total / n as f64) as f32],
            tx,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(ix, n);
                let g = up[0] / n as f32;
                for s in slot.iter_mut() {
                    *s += g;
                }
            })),
        ))
    }

    /// Mean squared error between same-shaped values.
    pub fn mse_loss(&mut self, a: &Value, b: &Value) -> Result<Value, NumericError> {
        same_shape("mse_loss", a, b)?;
        let n = a.numel();
        let mut total = 0.0f64;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = x as f64 - y as f64;
            total += d * d;
        }
        let (ia, ib) = (a.id(), b.id());
        let (ta, tb) = (a.tracked, b.tracked);
        let (da, db) = (Rc::clone(&a.data), Rc::clone(&b.data));
        Ok(self.push(
            vec![1],
            vec![(total / n as f64) as f32],
            ta || tb,
            Some(Box::new(move |up, gs| {
                let g = 2.0 * up[0] / n as f32;
                if ta {
                    let slot = gs.slot(ia, n);
                    for i in 0..n {
                        slot[i] += g * (da[i] - db[i]);
                    }
                }
                if tb {
                    let slot = gs.slot(ib, n);
                    for i in 0..n {
                        slot[i] -= g * (da[i] - db[i]);
                    }
                }
            })),
        ))
    }

    /// Mean binary cross-entropy with logits against fixed targets,
    /// computed in the standard overflow-safe form.
    pub fn bce_with_logits_loss(
        &mut self,
        logits: &Value,
        targets: &[f32],
    ) -> Result<Value, NumericError> {
        if logits.numel() != targets.len() {
            return Err(shape_err(
                "bce_with_logits_loss",
                format!("{:?} vs {} targets", logits.shape(), targets.len()),
            ));
        }
        let n = logits.numel();
        let mut total = 0.0f64;
        for (&x, &t) in logits.data().iter().zip(targets) {
            let x = x as f64;
            let t = t as f64;
            total += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        }
        let (il, tl) = (logits.id(), logits.tracked);
        let dl = Rc::clone(&logits.data);
        let targets = targets.to_vec();
        Ok(self.push(
            vec![1],
            vec![(total / n as f64) as f32],
            tl,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(il, n);
                let g = up[0] / n as f32;
                for i in 0..n {
                    let s = (1.0 / (1.0 + (-(dl[i] as f64)).exp())) as f32;
                    slot[i] += g * (s - targets[i]);
                }
            })),
        ))
    }

    /// Mean categorical cross-entropy over the rows selected by `mask`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: &Value,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Value, NumericError> {
        let (rows, cols) = last_axis("cross_entropy_masked", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "cross_entropy_masked",
                format!("{rows} rows vs {} targets / {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err(
                "cross_entropy_masked",
                format!("target {bad} out of range for {cols} classes"),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(shape_err("cross_entropy_masked", "empty mask".into()));
        }
        let mut probs = vec![0.0f32; rows * cols];
        kernels::softmax_rows(logits.data(), rows, cols, &mut probs);
        let mut logp = vec![0.0f32; rows * cols];
        kernels::log_softmax_rows(logits.data(), rows, cols, &mut logp);
        let mut total = 0.0f64;
        for r in 0..rows {
            if mask[r] {
                total -= logp[r * cols + targets[r]] as f64;
            }
        }
        let (il, tl) = (logits.id(), logits.tracked);
        let probs = Rc::new(probs);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(self.push(
            vec![1],
            vec![(total / count as f64) as f32],
            tl,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(il, rows * cols);
                let g = up[0] / count as f32;
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let p = &probs[r * cols..(r + 1) * cols];
                    let row = &mut slot[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        row[c] += g * p[c];
                    }
                    row[targets[r]] -= g;
                }
            })),
        ))
    }

    /// Per-row probability of the row's target class: softmax(x)[r, t_r].
    pub fn softmax_pick(
        &mut self,
        logits: &Value,
        targets: &[usize],
    ) -> Result<Value, NumericError> {
        let (rows, cols) = last_axis("softmax_pick", logits)?;
        if targets.len() != rows {
            return Err(shape_err(
                "softmax_pick",
                format!("{rows} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err(
                "softmax_pick",
                format!("target {bad} out of range for {cols} classes"),
            ));
        }
        let mut probs = vec![0.0f32; rows * cols];
        kernels::softmax_rows(logits.data(), rows, cols, &mut probs);
        let data: Vec<f32> = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| probs[r * cols + t])
            .collect();
        let (il, tl) = (logits.id(), logits.tracked);
        let probs = Rc::new(probs);
        let targets = targets.to_vec();
        Ok(self.push(
            vec![rows],
            data,
            tl,
            Some(Box::new(move |up, gs| {
                let slot = gs.slot(il, rows * cols);
                for r in 0..rows {
                    let t = targets[r];
                    let p = &probs[r * cols..(r + 1) * cols];
                    let pt = p[t];
                    let g = up[r] * pt;
                    let row = &mut slot[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        row[c] -= g * p[c];
                    }
                    row[t] += g;
                }
            })),
        ))
    }

    /// Single element of a vector as a scalar value.
    pub fn pick(&mut self, x: &Value, idx: usize) -> Result<Value, NumericError> {
        if x.shape().len() != 1 || idx >= x.numel() {
            return Err(shape_err(
                "pick",
                format!("index {idx} in {:?}", x.shape()),
            ));
        }
        let (ix, n, tx) = (x.id(), x.numel(), x.tracked);
        let v = x.data()[idx];
        Ok(self.push(
            vec![1],
            vec![v],
            tx,
            Some(Box::new(move |up, gs| {
                gs.slot(ix, n)[idx] += up[0];
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{
        central_diff, conv2d_f64 as conv64, conv2d_transpose_f64 as conv_t64, max_rel_err, widen,
        FD_H,
    };
    use super::super::{Rng, Tape};

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut rng = Rng::new(7);
        let a: Vec<f32> = (0..9).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let eye = tape.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let av = tape.constant(&[3, 3], a.clone());
        let out = tape.matmul(&eye, &av).unwrap();
        assert_eq!(out.data(), &a[..]);
    }

    #[test]
    fn conv2d_one_by_one_kernel_scales() {
        let mut rng = Rng::new(8);
        let x: Vec<f32> = (0..16).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(&[1, 4, 4], x.clone());
        let w = tape.constant(&[1, 1, 1, 1], vec![2.0]);
        let y = tape.conv2d(&xv, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        let doubled: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        assert_close(y.data(), &doubled, 0.0);
    }

    #[test]
    fn sum_all_grad_is_ones_and_mean_sq_grad_is_2x_over_n() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5]);
        let s = tape.sum_all(&x).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[1.0f32; 6][..]);

        let mut tape = Tape::new();
        let x = tape.leaf(&[6], vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5]);
        let sq = tape.mul(&x, &x).unwrap();
        let m = tape.mean_all(&sq).unwrap();
        let g = tape.backward(&m).unwrap();
        let expect: Vec<f32> = x.data().iter().map(|v| 2.0 * v / 6.0).collect();
        assert_close(g.of(&x).unwrap(), &expect, 1e-7);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0]);
        let frozen = tape.stop_gradient(&x);
        assert_eq!(frozen.data(), x.data());
        let prod = tape.mul(&x, &frozen).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        let g = tape.backward(&loss).unwrap();
        // d/dx of x·sg(x) treats the second factor as a constant.
        assert_close(g.of(&x).unwrap(), &[1.0, 2.0, 3.0], 0.0);

        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0]);
        let frozen = tape.stop_gradient(&x);
        let sq = tape.mul(&frozen, &frozen).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.of(&x).is_none(), "no path to x through sg");
    }

    #[test]
    fn straight_through_jacobian_is_identity() {
        // Backprop a one-hot upstream through straight_through: the
        // gradient must land on the passthrough input, unchanged.
        for hot in 0..4 {
            let mut tape = Tape::new();
            let x = tape.leaf(&[4], vec![0.1, 0.2, 0.3, 0.4]);
            let q = tape.constant(&[4], vec![10.0, 20.0, 30.0, 40.0]);
            let y = tape.straight_through(&q, &x).unwrap();
            assert_eq!(y.data(), q.data());
            let picked = tape.pick(&y, hot).unwrap();
            let g = tape.backward(&picked).unwrap();
            let mut expect = [0.0f32; 4];
            expect[hot] = 1.0;
            assert_close(g.of(&x).unwrap(), &expect, 0.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() {
        let mut rng = Rng::new(11);
        let x: Vec<f32> = (0..40).map(|_| rng.normal() * 3.0).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(&[5, 8], x);
        let p = tape.softmax_last(&xv).unwrap();
        let lp = tape.log_softmax_last(&xv).unwrap();
        for r in 0..5 {
            let sum: f32 = p.data()[r * 8..(r + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
        for i in 0..40 {
            assert!((p.data()[i].ln() - lp.data()[i]).abs() < 1e-5);
        }
    }

    // f64 re-implementations used as finite-difference oracles.

    fn mm64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                for j in 0..n {
                    out[i * n + j] += aik * b[kk * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        // Random 2-layer MLP, mse loss; every parameter checked against
        // central differences (h = 1e-3) on an f64 oracle, rel err < 1e-3.
        let (bi, hi, ho, no) = (2, 5, 8, 3); // batch, in, hidden, out
        let mut rng = Rng::new(42);
        let x: Vec<f32> = (0..bi * hi).map(|_| rng.normal()).collect();
        let t: Vec<f32> = (0..bi * no).map(|_| rng.normal()).collect();
        let w1: Vec<f32> = (0..hi * ho).map(|_| rng.normal() * 0.5).collect();
        let b1: Vec<f32> = (0..ho).map(|_| rng.normal() * 0.1).collect();
        let w2: Vec<f32> = (0..ho * no).map(|_| rng.normal() * 0.5).collect();
        let b2: Vec<f32> = (0..no).map(|_| rng.normal() * 0.1).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(&[bi, hi], x.clone());
        let w1v = tape.leaf(&[hi, ho], w1.clone());
        let b1v = tape.leaf(&[ho], b1.clone());
        let w2v = tape.leaf(&[ho, no], w2.clone());
        let b2v = tape.leaf(&[no], b2.clone());
        let tv = tape.constant(&[bi, no], t.clone());
        let h1 = tape.matmul(&xv, &w1v).unwrap();
        let h1 = tape.row_bias(&h1, &b1v).unwrap();
        let h1 = tape.relu(&h1).unwrap();
        let y = tape.matmul(&h1, &w2v).unwrap();
        let y = tape.row_bias(&y, &b2v).unwrap();
        let loss = tape.mse_loss(&y, &tv).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let mut analytic = Vec::new();
        for v in [&w1v, &b1v, &w2v, &b2v] {
            analytic.extend_from_slice(grads.of(v).unwrap());
        }

        let x64 = widen(&x);
        let t64 = widen(&t);
        let mut oracle = |p: &[f64]| -> f64 {
            let (w1, rest) = p.split_at(hi * ho);
            let (b1, rest) = rest.split_at(ho);
            let (w2, b2) = rest.split_at(ho * no);
            let mut h = mm64(&x64, w1, bi, hi, ho);
            for r in 0..bi {
                for c in 0..ho {
                    h[r * ho + c] = (h[r * ho + c] + b1[c]).max(0.0);
                }
            }
            let y = mm64(&h, w2, bi, ho, no);
            let mut sum = 0.0;
            for r in 0..bi {
                for c in 0..no {
                    let d = y[r * no + c] + b2[c] - t64[r * no + c];
                    sum += d * d;
                }
            }
            sum / (bi * no) as f64
        };
        let mut point = Vec::new();
        for arr in [&w1, &b1, &w2, &b2] {
            point.extend(widen(arr));
        }
        let numeric = central_diff(&mut oracle, &point, FD_H);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }


    #[test]
    fn conv2d_matches_oracle_forward_and_backward() {
        let (ci, h, wd) = (2, 5, 5);
        let (co, kh, kw) = (3, 3, 3);
        let (stride, pad) = (2, 1);
        let mut rng = Rng::new(21);
        let x: Vec<f32> = (0..ci * h * wd).map(|_| rng.normal()).collect();
        let w: Vec<f32> = (0..co * ci * kh * kw).map(|_| rng.normal()).collect();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let up: Vec<f32> = (0..co * oh * ow).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(&[ci, h, wd], x.clone());
        let wv = tape.leaf(&[co, ci, kh, kw], w.clone());
        let y = tape.conv2d(&xv, &wv, stride, pad).unwrap();
        let upv = tape.constant(&[co, oh, ow], up.clone());
        let weighted = tape.mul(&y, &upv).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let fwd64 = conv64(&widen(&x), &widen(&w), (ci, h, wd), (co, kh, kw), stride, pad);
        for (i, (&a, &b)) in y.data().iter().zip(&fwd64).enumerate() {
            assert!((a as f64 - b).abs() < 1e-5, "fwd {i}: {a} vs {b}");
        }

        let up64 = widen(&up);
        let mut oracle = |p: &[f64]| -> f64 {
            let (xs, ws) = p.split_at(ci * h * wd);
            conv64(xs, ws, (ci, h, wd), (co, kh, kw), stride, pad)
                .iter()
                .zip(&up64)
                .map(|(y, u)| y * u)
                .sum()
        };
        let mut point = widen(&x);
        point.extend(widen(&w));
        let numeric = central_diff(&mut oracle, &point, FD_H);
        let mut analytic = grads.of(&xv).unwrap().to_vec();
        analytic.extend_from_slice(grads.of(&wv).unwrap());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }


    #[test]
    fn conv2d_transpose_matches_oracle_forward_and_backward() {
        let (ci, h, wd) = (3, 4, 4);
        let (co, kh, kw) = (2, 4, 4);
        let (stride, pad) = (2, 1);
        let mut rng = Rng::new(22);
        let x: Vec<f32> = (0..ci * h * wd).map(|_| rng.normal()).collect();
        let w: Vec<f32> = (0..ci * co * kh * kw).map(|_| rng.normal()).collect();
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let up: Vec<f32> = (0..co * oh * ow).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(&[ci, h, wd], x.clone());
        let wv = tape.leaf(&[ci, co, kh, kw], w.clone());
        let y = tape.conv2d_transpose(&xv, &wv, stride, pad).unwrap();
        assert_eq!(y.shape(), &[co, oh, ow]);
        let upv = tape.constant(&[co, oh, ow], up.clone());
        let weighted = tape.mul(&y, &upv).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let fwd64 = conv_t64(&widen(&x), &widen(&w), (ci, h, wd), (co, kh, kw), stride, pad);
        for (i, (&a, &b)) in y.data().iter().zip(&fwd64).enumerate() {
            assert!((a as f64 - b).abs() < 1e-5, "fwd {i}: {a} vs {b}");
        }

        let up64 = widen(&up);
        let mut oracle = |p: &[f64]| -> f64 {
            let (xs, ws) = p.split_at(ci * h * wd);
            conv_t64(xs, ws, (ci, h, wd), (co, kh, kw), stride, pad)
                .iter()
                .zip(&up64)
                .map(|(y, u)| y * u)
                .sum()
        };
        let mut point = widen(&x);
        point.extend(widen(&w));
        let numeric = central_diff(&mut oracle, &point, FD_H);
        let mut analytic = grads.of(&xv).unwrap().to_vec();
        analytic.extend_from_slice(grads.of(&wv).unwrap());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let (rows, cols) = (3, 6);
        let eps = 1e-5f32;
        let mut rng = Rng::new(23);
        let x: Vec<f32> = (0..rows * cols).map(|_| rng.normal() * 2.0).collect();
        let gain: Vec<f32> = (0..cols).map(|_| 1.0 + rng.normal() * 0.2).collect();
        let bias: Vec<f32> = (0..cols).map(|_| rng.normal() * 0.2).collect();
        let up: Vec<f32> = (0..rows * cols).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(&[rows, cols], x.clone());
        let gv = tape.leaf(&[cols], gain.clone());
        let bv = tape.leaf(&[cols], bias.clone());
        let y = tape.layer_norm(&xv, &gv, &bv, eps).unwrap();
        let upv = tape.constant(&[rows, cols], up.clone());
        let weighted = tape.mul(&y, &upv).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let up64 = widen(&up);
        let mut oracle = |p: &[f64]| -> f64 {
            let (xs, rest) = p.split_at(rows * cols);
            let (gs, bs) = rest.split_at(cols);
            let mut sum = 0.0;
            for r in 0..rows {
                let row = &xs[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let istd = 1.0 / (var + eps as f64).sqrt();
                for c in 0..cols {
                    let yh = (row[c] - mean) * istd * gs[c] + bs[c];
                    sum += yh * up64[r * cols + c];
                }
            }
            sum
        };
        let mut point = widen(&x);
        point.extend(widen(&gain));
        point.extend(widen(&bias));
        let numeric = central_diff(&mut oracle, &point, FD_H);
        let mut analytic = grads.of(&xv).unwrap().to_vec();
        analytic.extend_from_slice(grads.of(&gv).unwrap());
        analytic.extend_from_slice(grads.of(&bv).unwrap());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn softmax_pick_matches_finite_differences() {
        let (rows, cols) = (4, 7);
        let targets = [2usize, 0, 6, 3];
        let mut rng = Rng::new(24);
        let x: Vec<f32> = (0..rows * cols).map(|_| rng.normal() * 2.0).collect();
        let up: Vec<f32> = (0..rows).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(&[rows, cols], x.clone());
        let p = tape.softmax_pick(&xv, &targets).unwrap();
        let upv = tape.constant(&[rows], up.clone());
        let weighted = tape.mul(&p, &upv).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let up64 = widen(&up);
        let mut oracle = |xs: &[f64]| -> f64 {
            let mut sum = 0.0;
            for r in 0..rows {
                let row = &xs[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                sum += (row[targets[r]] - max).exp() / z * up64[r];
            }
            sum
        };
        let numeric = central_diff(&mut oracle, &widen(&x), FD_H);
        let err = max_rel_err(grads.of(&xv).unwrap(), &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn cross_entropy_masked_hand_case() {
        // Two rows, only the first masked in. loss = -log softmax(row0)[1].
        let mut tape = Tape::new();
        let logits = tape.leaf(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0]);
        let loss = tape
            .cross_entropy_masked(&logits, &[1, 2], &[true, false])
            .unwrap();
        let z = (1.0f64).exp() + (2.0f64).exp() + (0.5f64).exp();
        let expect = -((2.0f64).exp() / z).ln();
        assert!((loss.scalar() as f64 - expect).abs() < 1e-6);

        let g = tape.backward(&loss).unwrap();
        let gl = g.of(&logits).unwrap();
        let p: Vec<f64> = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp() / z).collect();
        assert!((gl[0] as f64 - p[0]).abs() < 1e-6);
        assert!((gl[1] as f64 - (p[1] - 1.0)).abs() < 1e-6);
        assert!((gl[2] as f64 - p[2]).abs() < 1e-6);
        assert_eq!(&gl[3..], &[0.0, 0.0, 0.0], "masked-out row gets no gradient");
    }

    #[test]
    fn bce_with_logits_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[4], vec![0.0; 4]);
        let loss = tape
            .bce_with_logits_loss(&logits, &[1.0, 0.0, 1.0, 0.0])
            .unwrap();
        assert!((loss.scalar() - (2.0f32).ln()).abs() < 1e-6);
        let g = tape.backward(&loss).unwrap();
        let gl = g.of(&logits).unwrap();
        // sigmoid(0) - t, scaled by 1/n.
        assert_close(gl, &[-0.125, 0.125, -0.125, 0.125], 1e-7);
    }

    #[test]
    fn bce_with_logits_is_stable_at_extremes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[2], vec![80.0, -80.0]);
        let loss = tape.bce_with_logits_loss(&logits, &[1.0, 0.0]).unwrap();
        assert!(loss.scalar().is_finite());
        assert!(loss.scalar() >= 0.0);
        let g = tape.backward(&loss).unwrap();
        assert!(g.of(&logits).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_gathers_and_accumulates() {
        let mut tape = Tape::new();
        let table = tape.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = tape.embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_close(out.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0);
        let loss = tape.sum_all(&out).unwrap();
        let g = tape.backward(&loss).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_close(g.of(&table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.leaf(&[2, 1], vec![5.0, 6.0]);
        let cat = tape.concat_last(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_close(cat.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0], 0.0);
        let right = tape.slice_last(&cat, 2, 1).unwrap();
        assert_close(right.data(), &[5.0, 6.0], 0.0);
        let loss = tape.sum_all(&right).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.of(&a).is_none() || g.of(&a).unwrap().iter().all(|&v| v == 0.0));
        assert_close(g.of(&b).unwrap(), &[1.0, 1.0], 0.0);
    }

    #[test]
    fn chw_cell_views_invert_and_route() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2, 3], (0..12).map(|v| v as f32).collect());
        let cells = tape.cells_from_chw(&x).unwrap();
        assert_eq!(cells.shape(), &[6, 2]);
        // cell 0 = (h0,w0): channels 0 and 6.
        assert_close(&cells.data()[0..2], &[0.0, 6.0], 0.0);
        let back = tape.chw_from_cells(&cells, 2, 3).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_close(back.data(), x.data(), 0.0);
        let loss = tape.sum_all(&back).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[1.0f32; 12][..]);
    }

    #[test]
    fn upsample_nearest_repeats_and_pools_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_close(
            &y.data()[0..8],
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0],
            0.0,
        );
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_close(g.of(&x).unwrap(), &[4.0; 4], 0.0);
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]);
        let y = tape.global_avg_pool(&x).unwrap();
        assert_close(y.data(), &[2.0, 15.0], 0.0);
        let picked = tape.pick(&y, 1).unwrap();
        let g = tape.backward(&picked).unwrap();
        assert_close(g.of(&x).unwrap(), &[0.0, 0.0, 0.5, 0.5], 0.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_train() {
        let mut rng = Rng::new(5);
        let x_data: Vec<f32> = vec![1.0; 1000];

        let mut tape = Tape::new();
        let x = tape.leaf(&[1000], x_data.clone());
        let y = tape.dropout(&x, 0.5, &mut rng);
        assert_eq!(y.data(), x.data());

        let mut tape = Tape::training();
        let x = tape.leaf(&[1000], x_data);
        let y = tape.dropout(&x, 0.5, &mut rng);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!((400..600).contains(&kept), "kept {kept} of 1000");
        for &v in y.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-6);
        }
        // Backward mirrors the same mask.
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        for (gv, yv) in g.of(&x).unwrap().iter().zip(y.data()) {
            assert_eq!(*gv, *yv);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]);
        let b = tape.constant(&[2, 2], vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");

        let err = tape.add(&a, &b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0]);
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn value_reused_twice_accumulates_gradient() {
        // y = x + x ⇒ dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![3.0, 4.0]);
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_close(g.of(&x).unwrap(), &[2.0, 2.0], 0.0);
    }

    #[test]
    fn params_requested_twice_share_a_node() {
        use super::super::{AdamState, ParamStore};
        let mut store = ParamStore::new();
        let pid = store.add("w", &[2], vec![1.0, 1.0]);
        let mut adam = AdamState::new(&store, 0.1);
        let mut tape = Tape::new();
        let w1 = tape.param(&store, pid);
        let w2 = tape.param(&store, pid);
        assert_eq!(w1.id(), w2.id());
        let y = tape.mul(&w1, &w2).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        // d(w²)/dw = 2w even when the two uses came from separate calls.
        assert_close(g.for_param(pid).unwrap(), &[2.0, 2.0], 0.0);
        adam.step(&mut store, &g).unwrap();
    }

    #[test]
    fn log_clamped_floors_and_zeroes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 1e-12, 0.5]);
        let y = tape.log_clamped(&x, 1e-7).unwrap();
        assert!((y.data()[1] - (1e-7f32).ln()).abs() < 1e-3);
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        let gx = g.of(&x).unwrap();
        assert!((gx[0] - 1.0).abs() < 1e-6);
        assert_eq!(gx[1], 0.0, "clamped input gets zero gradient");
        assert!((gx[2] - 2.0).abs() < 1e-5);
    }
}
