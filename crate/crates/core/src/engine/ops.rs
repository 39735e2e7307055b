//! Forward ops and their backward rules.
//!
//! Every op validates shapes, computes forward values (64-bit accumulation in
//! reductions), checks the output for non-finite values, and — when the tape
//! is recording — pushes a backward closure that accumulates input gradients.

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::{Shape, Tensor};

/// Predictions are clamped to `[ε, 1-ε]` inside the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 {
        return Err(Error::Geometry("kernel size must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out == 0 {
        return Err(Error::Geometry("empty output extent".into()));
    }
    Ok(out)
}

fn expect_vector(t: &Tensor, len: usize, what: &str) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.h != 1 || s.w != 1 || s.c != len {
        return Err(Error::Dimension(format!(
            "{what} must be a length-{len} vector, got shape {s}"
        )));
    }
    Ok(())
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Value("stride must be >= 1".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// matmul kernels (f64 accumulation, register-tiled)
// ---------------------------------------------------------------------------
//
// Both entry points share one micro-kernel that accumulates an MR×NR output
// tile across the full K extent in local f64 registers, converting B from
// f32 on load. Compared to row-at-a-time axpy loops this cuts B traffic by
// MR and keeps the accumulators out of memory, which is what the training
// loop's throughput budget rides on. Results stay deterministic: the
// summation order is fixed and single-threaded.

const GEMM_MR: usize = 4;
const GEMM_NR: usize = 16;

/// Full-K product of the MR×NR tile at (`i`, `j`).
#[inline(always)]
fn gemm_tile(
    a: &[f32],
    b: &[f32],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
) -> [[f64; GEMM_NR]; GEMM_MR] {
    let mut tile = [[0.0f64; GEMM_NR]; GEMM_MR];
    for l in 0..k {
        let brow = &b[l * n + j..l * n + j + GEMM_NR];
        let mut bv = [0.0f64; GEMM_NR];
        for (t, &v) in bv.iter_mut().zip(brow.iter()) {
            *t = v as f64;
        }
        for (r, row) in tile.iter_mut().enumerate() {
            let al = a[(i + r) * k + l] as f64;
            for (t, &v) in row.iter_mut().zip(bv.iter()) {
                *t += al * v;
            }
        }
    }
    tile
}

/// Scalar dot product for edge cells outside full tiles.
#[inline(always)]
fn gemm_cell(a: &[f32], b: &[f32], row: usize, col: usize, k: usize, n: usize) -> f64 {
    let arow = &a[row * k..(row + 1) * k];
    let mut s = 0.0f64;
    for (l, &al) in arow.iter().enumerate() {
        s += al as f64 * b[l * n + col] as f64;
    }
    s
}

/// Drives the tiling; `write` receives each finished cell value.
#[inline(always)]
fn gemm_drive<F: FnMut(usize, f64)>(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    mut write: F,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut i = 0;
    while i + GEMM_MR <= m {
        let mut j = 0;
        while j + GEMM_NR <= n {
            let tile = gemm_tile(a, b, i, j, k, n);
            for (r, row) in tile.iter().enumerate() {
                let base = (i + r) * n + j;
                for (t, &v) in row.iter().enumerate() {
                    write(base + t, v);
                }
            }
            j += GEMM_NR;
        }
        for r in i..i + GEMM_MR {
            for col in j..n {
                write(r * n + col, gemm_cell(a, b, r, col, k, n));
            }
        }
        i += GEMM_MR;
    }
    for r in i..m {
        for col in 0..n {
            write(r * n + col, gemm_cell(a, b, r, col, k, n));
        }
    }
}

/// `out[M×N] = A[M×K] · B[K×N]`, overwriting `out`.
fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    gemm_drive(a, b, m, k, n, |idx, v| out[idx] = v as f32);
}

/// `out[M×N] = A[M×K] · B[K×N]`, overwriting `out` (f64 output).
fn matmul_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    gemm_drive(a, b, m, k, n, |idx, v| out[idx] = v);
}

/// `acc[M×N] += A[M×K] · B[K×N]` with an `f64` accumulator matrix.
fn matmul_accum(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    debug_assert_eq!(acc.len(), m * n);
    gemm_drive(a, b, m, k, n, |idx, v| acc[idx] += v);
}

fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut Vec<f32>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Writes the im2col matrix `[Cin·kh·kw × OH·OW]` for one sample.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    shape: Shape,
    sample: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let (c_in, h, w) = (shape.c, shape.h, shape.w);
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    cols.fill(0.0);
    let ohw = oh * ow;
    for ci in 0..c_in {
        let base = shape.at(sample, ci, 0, 0);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = base + iy as usize * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatters a `[Cin·kh·kw × OH·OW]` gradient matrix back onto one sample.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    shape: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let (c_in, h, w) = (shape.c, shape.h, shape.w);
    debug_assert_eq!(dx.len(), c_in * h * w);
    let ohw = oh * ow;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] += dcols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `(N, Cin, H, W)`, `weight` is `(Cout, Cin, kh, kw)`, `bias`
/// (optional) a length-`Cout` vector. Output is `(N, Cout, OH, OW)` with
/// `OH = (H + 2·padding − kh) / stride + 1`.
pub fn conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_stride(stride)?;
    let xs = input.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(Error::Dimension(format!(
            "conv2d: weight expects {} input channels, input has {}",
            ws.c, xs.c
        )));
    }
    if let Some(b) = bias {
        expect_vector(b, ws.n, "conv2d bias")?;
    }
    let (kh, kw) = (ws.h, ws.w);
    let oh = conv_out_dim(xs.h, kh, stride, padding)?;
    let ow = conv_out_dim(xs.w, kw, stride, padding)?;
    let (c_out, k) = (ws.n, ws.c * kh * kw);
    let ohw = oh * ow;

    let out_shape = Shape::new(xs.n, c_out, oh, ow);
    let mut out = vec![0.0f32; out_shape.count()];
    // One im2col matrix per sample; kept for the backward pass when recording.
    let mut all_cols = vec![0.0f32; xs.n * k * ohw];
    {
        let x = input.values();
        let wv = weight.values();
        for n in 0..xs.n {
            let cols = &mut all_cols[n * k * ohw..(n + 1) * k * ohw];
            im2col(&x, xs, n, kh, kw, stride, padding, oh, ow, cols);
            matmul(
                &wv,
                cols,
                c_out,
                k,
                ohw,
                &mut out[n * c_out * ohw..(n + 1) * c_out * ohw],
            );
        }
        if let Some(b) = bias {
            let bv = b.values();
            for n in 0..xs.n {
                for co in 0..c_out {
                    let bias_v = bv[co];
                    let row = &mut out[(n * c_out + co) * ohw..(n * c_out + co + 1) * ohw];
                    for v in row.iter_mut() {
                        *v += bias_v;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("conv2d")?;

    if tape.is_recording() {
        let input_h = input.clone();
        let weight_h = weight.clone();
        let bias_h = bias.cloned();
        let out_h = out.clone();
        tape.record("conv2d", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let wv = weight_h.values().clone();
            // Wᵀ, built once: the dcols product below is a plain matmul.
            let mut w_t = Vec::new();
            transpose(&wv, c_out, k, &mut w_t);
            let mut dw = vec![0.0f64; c_out * k];
            let mut db = vec![0.0f64; c_out];
            let mut dx = vec![0.0f64; xs.c * xs.h * xs.w];
            let mut dx_all = vec![0.0f32; xs.count()];
            let mut cols_t = Vec::new();
            let mut dcols = vec![0.0f64; k * ohw];
            for n in 0..xs.n {
                let cols = &all_cols[n * k * ohw..(n + 1) * k * ohw];
                let dout = &g[n * c_out * ohw..(n + 1) * c_out * ohw];
                // dW += dOut · colsᵀ
                transpose(cols, k, ohw, &mut cols_t);
                matmul_accum(dout, &cols_t, c_out, ohw, k, &mut dw);
                // db += row sums of dOut
                for co in 0..c_out {
                    let row = &dout[co * ohw..(co + 1) * ohw];
                    let mut s = 0.0f64;
                    for &v in row {
                        s += v as f64;
                    }
                    db[co] += s;
                }
                // dcols = Wᵀ · dOut, scattered back through col2im
                matmul_f64(&w_t, dout, k, c_out, ohw, &mut dcols);
                dx.fill(0.0);
                col2im(&dcols, xs, kh, kw, stride, padding, oh, ow, &mut dx);
                let dst = &mut dx_all[n * dx.len()..(n + 1) * dx.len()];
                for (d, &v) in dst.iter_mut().zip(dx.iter()) {
                    *d = v as f32;
                }
            }
            input_h.accumulate_grad(&dx_all);
            let dw32: Vec<f32> = dw.iter().map(|&v| v as f32).collect();
            weight_h.accumulate_grad(&dw32);
            if let Some(b) = &bias_h {
                let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                b.accumulate_grad(&db32);
            }
        });
    }
    Ok(out)
}

/// 1×1 convolution (channel mixing). `weight` must be `(Cout, Cin, 1, 1)`.
pub fn pointwise_conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::Dimension(format!(
            "pointwise_conv2d: kernel must be 1x1, got {}x{}",
            ws.h, ws.w
        )));
    }
    conv2d(tape, input, weight, bias, 1, 0)
}

/// Depthwise convolution: one kernel per input channel, `weight` is
/// `(C, 1, kh, kw)`, output channel count equals input channel count.
pub fn depthwise_conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_stride(stride)?;
    let xs = input.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::Dimension(format!(
            "depthwise_conv2d: weight shape {} does not match {} input channels",
            ws, xs.c
        )));
    }
    if let Some(b) = bias {
        expect_vector(b, xs.c, "depthwise_conv2d bias")?;
    }
    let (kh, kw) = (ws.h, ws.w);
    let oh = conv_out_dim(xs.h, kh, stride, padding)?;
    let ow = conv_out_dim(xs.w, kw, stride, padding)?;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0f32; out_shape.count()];
    {
        let x = input.values();
        let wv = weight.values();
        let bv = bias.map(|b| b.values().clone());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let kernel = &wv[c * kh * kw..(c + 1) * kh * kw];
                let b0 = bv.as_ref().map_or(0.0, |b| b[c] as f64);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x[xs.at(n, c, iy as usize, ix as usize)] as f64
                                    * kernel[ki * kw + kj] as f64;
                            }
                        }
                        out[out_shape.at(n, c, oy, ox)] = (acc + b0) as f32;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("depthwise_conv2d")?;

    if tape.is_recording() {
        let input_h = input.clone();
        let weight_h = weight.clone();
        let bias_h = bias.cloned();
        let out_h = out.clone();
        tape.record("depthwise_conv2d", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let x = input_h.values().clone();
            let wv = weight_h.values().clone();
            let mut dx = vec![0.0f64; xs.count()];
            let mut dw = vec![0.0f64; ws.count()];
            let mut db = vec![0.0f64; xs.c];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let kernel = &wv[c * kh * kw..(c + 1) * kh * kw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[out_shape.at(n, c, oy, ox)] as f64;
                            if go == 0.0 {
                                continue;
                            }
                            db[c] += go;
                            for ki in 0..kh {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let ix = (ox * stride + kj) as isize - padding as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    let xi = xs.at(n, c, iy as usize, ix as usize);
                                    dx[xi] += go * kernel[ki * kw + kj] as f64;
                                    dw[c * kh * kw + ki * kw + kj] += go * x[xi] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dx32: Vec<f32> = dx.iter().map(|&v| v as f32).collect();
            input_h.accumulate_grad(&dx32);
            let dw32: Vec<f32> = dw.iter().map(|&v| v as f32).collect();
            weight_h.accumulate_grad(&dw32);
            if let Some(b) = &bias_h {
                let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                b.accumulate_grad(&db32);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling with a square `k×k` window, no padding. Ties pick the first
/// maximum in scan order, making backward deterministic.
pub fn max_pool2d(tape: &mut Tape, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let xs = input.shape();
    if k == 0 || k > xs.h || k > xs.w {
        return Err(Error::Geometry(format!(
            "max_pool2d: window {k} invalid for input {}x{}",
            xs.h, xs.w
        )));
    }
    let oh = (xs.h - k) / stride + 1;
    let ow = (xs.w - k) / stride + 1;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0f32; out_shape.count()];
    let mut argmax = vec![0usize; out_shape.count()];
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for ki in 0..k {
                            for kj in 0..k {
                                let i = xs.at(n, c, oy * stride + ki, ox * stride + kj);
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = out_shape.at(n, c, oy, ox);
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("max_pool2d")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("max_pool2d", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![0.0f32; xs.count()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g[o];
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Average pooling with a square `k×k` window, no padding.
pub fn avg_pool2d(tape: &mut Tape, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let xs = input.shape();
    if k == 0 || k > xs.h || k > xs.w {
        return Err(Error::Geometry(format!(
            "avg_pool2d: window {k} invalid for input {}x{}",
            xs.h, xs.w
        )));
    }
    let oh = (xs.h - k) / stride + 1;
    let ow = (xs.w - k) / stride + 1;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0f32; out_shape.count()];
    let inv = 1.0f64 / (k * k) as f64;
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ki in 0..k {
                            for kj in 0..k {
                                acc += x[xs.at(n, c, oy * stride + ki, ox * stride + kj)] as f64;
                            }
                        }
                        out[out_shape.at(n, c, oy, ox)] = (acc * inv) as f32;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("avg_pool2d")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("avg_pool2d", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![0.0f32; xs.count()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = (g[out_shape.at(n, c, oy, ox)] as f64 * inv) as f32;
                            for ki in 0..k {
                                for kj in 0..k {
                                    dx[xs.at(n, c, oy * stride + ki, ox * stride + kj)] += gv;
                                }
                            }
                        }
                    }
                }
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Global average pooling: `(N, C, H, W) → (N, C, 1, 1)`.
pub fn global_avg_pool(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let hw = xs.h * xs.w;
    if hw == 0 {
        return Err(Error::Geometry("global_avg_pool: empty spatial extent".into()));
    }
    let out_shape = Shape::new(xs.n, xs.c, 1, 1);
    let mut out = vec![0.0f32; out_shape.count()];
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.at(n, c, 0, 0);
                let mut acc = 0.0f64;
                for &v in &x[base..base + hw] {
                    acc += v as f64;
                }
                out[n * xs.c + c] = (acc / hw as f64) as f32;
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("global_avg_pool")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("global_avg_pool", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let inv = 1.0f64 / hw as f64;
            let mut dx = vec![0.0f32; xs.count()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let gv = (g[n * xs.c + c] as f64 * inv) as f32;
                    let base = xs.at(n, c, 0, 0);
                    for v in &mut dx[base..base + hw] {
                        *v += gv;
                    }
                }
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Global max pooling: `(N, C, H, W) → (N, C, 1, 1)`.
pub fn global_max_pool(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let hw = xs.h * xs.w;
    if hw == 0 {
        return Err(Error::Geometry("global_max_pool: empty spatial extent".into()));
    }
    let out_shape = Shape::new(xs.n, xs.c, 1, 1);
    let mut out = vec![0.0f32; out_shape.count()];
    let mut argmax = vec![0usize; out_shape.count()];
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.at(n, c, 0, 0);
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base;
                for (i, &v) in x[base..base + hw].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = base + i;
                    }
                }
                out[n * xs.c + c] = best;
                argmax[n * xs.c + c] = best_i;
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("global_max_pool")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("global_max_pool", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![0.0f32; xs.count()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g[o];
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// Fully connected layer on flattened features: input `(N, Cin, 1, 1)`,
/// weight `(Cout, Cin, 1, 1)`, bias a length-`Cout` vector; output
/// `(N, Cout, 1, 1)` computed as `x · Wᵀ + b`.
pub fn dense(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let xs = input.shape();
    if xs.h != 1 || xs.w != 1 {
        return Err(Error::Dimension(format!(
            "dense expects flattened input (N,C,1,1), got {xs}"
        )));
    }
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(Error::Dimension(format!(
            "dense: weight {ws} incompatible with input {xs}"
        )));
    }
    let (n, cin, cout) = (xs.n, xs.c, ws.n);
    if let Some(b) = bias {
        expect_vector(b, cout, "dense bias")?;
    }
    let out_shape = Shape::new(n, cout, 1, 1);
    let mut out = vec![0.0f32; n * cout];
    {
        let x = input.values();
        let wv = weight.values();
        // Transposed weight gives a contiguous inner loop over Cout.
        let mut wt = Vec::new();
        transpose(&wv, cout, cin, &mut wt);
        let mut acc = vec![0.0f64; cout];
        for i in 0..n {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let xrow = &x[i * cin..(i + 1) * cin];
            for (l, &xv) in xrow.iter().enumerate() {
                let xv = xv as f64;
                let wrow = &wt[l * cout..(l + 1) * cout];
                for (j, &wv) in wrow.iter().enumerate() {
                    acc[j] += xv * wv as f64;
                }
            }
            for (o, &v) in out[i * cout..(i + 1) * cout].iter_mut().zip(acc.iter()) {
                *o = v as f32;
            }
        }
        if let Some(b) = bias {
            let bv = b.values();
            for i in 0..n {
                for (o, &bvv) in out[i * cout..(i + 1) * cout].iter_mut().zip(bv.iter()) {
                    *o += bvv;
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("dense")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let weight_h = weight.clone();
        let bias_h = bias.cloned();
        let out_h = out.clone();
        tape.record("dense", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let x = input_h.values().clone();
            let wv = weight_h.values().clone();
            let mut dx = vec![0.0f64; n * cin];
            let mut dw = vec![0.0f64; cout * cin];
            let mut db = vec![0.0f64; cout];
            for i in 0..n {
                let grow = &g[i * cout..(i + 1) * cout];
                let xrow = &x[i * cin..(i + 1) * cin];
                let dxrow = &mut dx[i * cin..(i + 1) * cin];
                for (o, &go) in grow.iter().enumerate() {
                    let go = go as f64;
                    if go == 0.0 {
                        continue;
                    }
                    db[o] += go;
                    let wrow = &wv[o * cin..(o + 1) * cin];
                    let dwrow = &mut dw[o * cin..(o + 1) * cin];
                    for l in 0..cin {
                        dxrow[l] += go * wrow[l] as f64;
                        dwrow[l] += go * xrow[l] as f64;
                    }
                }
            }
            let dx32: Vec<f32> = dx.iter().map(|&v| v as f32).collect();
            input_h.accumulate_grad(&dx32);
            let dw32: Vec<f32> = dw.iter().map(|&v| v as f32).collect();
            weight_h.accumulate_grad(&dw32);
            if let Some(b) = &bias_h {
                let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                b.accumulate_grad(&db32);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise & structural
// ---------------------------------------------------------------------------

/// Rectified linear unit. The derivative at exactly zero is taken as zero.
pub fn relu(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let out_v: Vec<f32> = input.values().iter().map(|&v| v.max(0.0)).collect();
    let out = Tensor::from_vec(input.shape(), out_v)?;
    out.ensure_finite("relu")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("relu", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let x = input_h.values().clone();
            let dx: Vec<f32> = g
                .iter()
                .zip(x.iter())
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Logistic sigmoid, evaluated in f64 per element.
pub fn sigmoid(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let out_v: Vec<f32> = input
        .values()
        .iter()
        .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
        .collect();
    let out = Tensor::from_vec(input.shape(), out_v)?;
    out.ensure_finite("sigmoid")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("sigmoid", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let y = out_h.values().clone();
            let dx: Vec<f32> = g
                .iter()
                .zip(y.iter())
                .map(|(&gv, &yv)| {
                    let y = yv as f64;
                    (gv as f64 * y * (1.0 - y)) as f32
                })
                .collect();
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Elementwise addition of two tensors with identical shapes.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let out_v: Vec<f32> = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::from_vec(a.shape(), out_v)?;
    out.ensure_finite("add")?;
    if tape.is_recording() {
        let a_h = a.clone();
        let b_h = b.clone();
        let out_h = out.clone();
        tape.record("add", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            a_h.accumulate_grad(&g);
            b_h.accumulate_grad(&g);
        });
    }
    Ok(out)
}

fn broadcast_shapes(a: Shape, b: Shape) -> Result<Shape> {
    let dim = |x: usize, y: usize, name: &str| -> Result<usize> {
        if x == y || x == 1 || y == 1 {
            Ok(x.max(y))
        } else {
            Err(Error::Dimension(format!(
                "mul_broadcast: {name} dims {x} and {y} are not broadcastable"
            )))
        }
    };
    Ok(Shape::new(
        dim(a.n, b.n, "batch")?,
        dim(a.c, b.c, "channel")?,
        dim(a.h, b.h, "height")?,
        dim(a.w, b.w, "width")?,
    ))
}

#[inline]
fn bcast_index(s: Shape, n: usize, c: usize, h: usize, w: usize) -> usize {
    let n = if s.n == 1 { 0 } else { n };
    let c = if s.c == 1 { 0 } else { c };
    let h = if s.h == 1 { 0 } else { h };
    let w = if s.w == 1 { 0 } else { w };
    s.at(n, c, h, w)
}

/// Elementwise product with NumPy-style broadcasting: each dimension must be
/// equal or 1. Covers attention reweighting patterns such as
/// `(N,C,1,1) ⊗ (N,C,H,W)` and `(N,1,H,W) ⊗ (N,C,H,W)`.
pub fn mul_broadcast(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let os = broadcast_shapes(a.shape(), b.shape())?;
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = vec![0.0f32; os.count()];
    {
        let av = a.values();
        let bv = b.values();
        let mut i = 0;
        for n in 0..os.n {
            for c in 0..os.c {
                for h in 0..os.h {
                    for w in 0..os.w {
                        out[i] = av[bcast_index(sa, n, c, h, w)] * bv[bcast_index(sb, n, c, h, w)];
                        i += 1;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(os, out)?;
    out.ensure_finite("mul_broadcast")?;
    if tape.is_recording() {
        let a_h = a.clone();
        let b_h = b.clone();
        let out_h = out.clone();
        tape.record("mul_broadcast", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let av = a_h.values().clone();
            let bv = b_h.values().clone();
            let mut da = vec![0.0f64; av.len()];
            let mut db = vec![0.0f64; bv.len()];
            let mut i = 0;
            for n in 0..os.n {
                for c in 0..os.c {
                    for h in 0..os.h {
                        for w in 0..os.w {
                            let gv = g[i] as f64;
                            let ia = bcast_index(sa, n, c, h, w);
                            let ib = bcast_index(sb, n, c, h, w);
                            da[ia] += gv * bv[ib] as f64;
                            db[ib] += gv * av[ia] as f64;
                            i += 1;
                        }
                    }
                }
            }
            let da32: Vec<f32> = da.iter().map(|&v| v as f32).collect();
            a_h.accumulate_grad(&da32);
            let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
            b_h.accumulate_grad(&db32);
        });
    }
    Ok(out)
}

/// Concatenates two tensors along the channel axis; `N`, `H`, `W` must match.
pub fn concat_channels(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Dimension(format!(
            "concat_channels: non-channel dims differ, {sa} vs {sb}"
        )));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let hw = sa.h * sa.w;
    let mut out = vec![0.0f32; os.count()];
    {
        let av = a.values();
        let bv = b.values();
        for n in 0..os.n {
            let dst = &mut out[os.at(n, 0, 0, 0)..os.at(n, 0, 0, 0) + os.c * hw];
            dst[..sa.c * hw].copy_from_slice(&av[n * sa.c * hw..(n + 1) * sa.c * hw]);
            dst[sa.c * hw..].copy_from_slice(&bv[n * sb.c * hw..(n + 1) * sb.c * hw]);
        }
    }
    let out = Tensor::from_vec(os, out)?;
    out.ensure_finite("concat_channels")?;
    if tape.is_recording() {
        let a_h = a.clone();
        let b_h = b.clone();
        let out_h = out.clone();
        tape.record("concat_channels", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut da = vec![0.0f32; sa.count()];
            let mut db = vec![0.0f32; sb.count()];
            for n in 0..os.n {
                let src = &g[n * os.c * hw..(n + 1) * os.c * hw];
                da[n * sa.c * hw..(n + 1) * sa.c * hw].copy_from_slice(&src[..sa.c * hw]);
                db[n * sb.c * hw..(n + 1) * sb.c * hw].copy_from_slice(&src[sa.c * hw..]);
            }
            a_h.accumulate_grad(&da);
            b_h.accumulate_grad(&db);
        });
    }
    Ok(out)
}

/// Per-position mean over the channel axis: `(N, C, H, W) → (N, 1, H, W)`.
pub fn channel_mean(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let os = Shape::new(xs.n, 1, xs.h, xs.w);
    let hw = xs.h * xs.w;
    let mut out = vec![0.0f64; os.count()];
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.at(n, c, 0, 0);
                let orow = &mut out[n * hw..(n + 1) * hw];
                for (o, &v) in orow.iter_mut().zip(x[base..base + hw].iter()) {
                    *o += v as f64;
                }
            }
        }
    }
    let inv = 1.0f64 / xs.c as f64;
    let out_v: Vec<f32> = out.iter().map(|&v| (v * inv) as f32).collect();
    let out = Tensor::from_vec(os, out_v)?;
    out.ensure_finite("channel_mean")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("channel_mean", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![0.0f32; xs.count()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = xs.at(n, c, 0, 0);
                    for (d, &gv) in dx[base..base + hw].iter_mut().zip(g[n * hw..].iter()) {
                        *d = (gv as f64 * inv) as f32;
                    }
                }
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Per-position max over the channel axis: `(N, C, H, W) → (N, 1, H, W)`.
/// Ties pick the lowest channel index.
pub fn channel_max(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let os = Shape::new(xs.n, 1, xs.h, xs.w);
    let hw = xs.h * xs.w;
    let mut out = vec![f32::NEG_INFINITY; os.count()];
    let mut argmax = vec![0usize; os.count()];
    {
        let x = input.values();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.at(n, c, 0, 0);
                for p in 0..hw {
                    let v = x[base + p];
                    let o = n * hw + p;
                    if v > out[o] {
                        out[o] = v;
                        argmax[o] = base + p;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(os, out)?;
    out.ensure_finite("channel_max")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("channel_max", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let mut dx = vec![0.0f32; xs.count()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g[o];
            }
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Sum of all elements, yielding a `(1,1,1,1)` scalar.
pub fn sum_all(tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
    let mut acc = 0.0f64;
    for &v in input.values().iter() {
        acc += v as f64;
    }
    let out = Tensor::scalar(acc as f32);
    out.ensure_finite("sum_all")?;
    if tape.is_recording() {
        let input_h = input.clone();
        let out_h = out.clone();
        tape.record("sum_all", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let dx = vec![g[0]; input_h.len()];
            input_h.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Batch normalization over `(N, H, W)` per channel.
///
/// Training mode normalizes with biased batch statistics and updates the
/// running buffers in place: `running = momentum·running + (1−momentum)·batch`.
/// Inference mode applies the same affine formula with the stored running
/// statistics and never mutates them.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    tape: &mut Tape,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let xs = input.shape();
    expect_vector(gamma, xs.c, "batch_norm gamma")?;
    expect_vector(beta, xs.c, "batch_norm beta")?;
    expect_vector(running_mean, xs.c, "batch_norm running_mean")?;
    expect_vector(running_var, xs.c, "batch_norm running_var")?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Value(format!(
            "batch_norm momentum {momentum} outside [0,1]"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Value("batch_norm eps must be positive".into()));
    }
    let hw = xs.h * xs.w;
    let m = (xs.n * hw) as f64;
    if training && m < 1.0 {
        return Err(Error::Geometry("batch_norm: empty batch".into()));
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let x = input.values();
        let mut mean = vec![0.0f64; xs.c];
        let mut var = vec![0.0f64; xs.c];
        for c in 0..xs.c {
            let mut s = 0.0f64;
            for n in 0..xs.n {
                let base = xs.at(n, c, 0, 0);
                for &v in &x[base..base + hw] {
                    s += v as f64;
                }
            }
            let mu = s / m;
            let mut sq = 0.0f64;
            for n in 0..xs.n {
                let base = xs.at(n, c, 0, 0);
                for &v in &x[base..base + hw] {
                    let d = v as f64 - mu;
                    sq += d * d;
                }
            }
            mean[c] = mu;
            var[c] = sq / m;
        }
        mean.iter().for_each(|v| debug_assert!(v.is_finite()));
        (mean, var)
    } else {
        let rm = running_mean.values();
        let rv = running_var.values();
        (
            rm.iter().map(|&v| v as f64).collect(),
            rv.iter().map(|&v| v as f64).collect(),
        )
    };

    let out_shape = xs;
    let mut out = vec![0.0f32; xs.count()];
    let mut xhat: Vec<f32> = Vec::new();
    let record = tape.is_recording();
    {
        let x = input.values();
        let gv = gamma.values();
        let bv = beta.values();
        if record {
            xhat = vec![0.0f32; xs.count()];
        }
        for n in 0..xs.n {
            for c in 0..xs.c {
                let inv_std = 1.0 / (var[c] + eps).sqrt();
                let (ga, be) = (gv[c] as f64, bv[c] as f64);
                let base = xs.at(n, c, 0, 0);
                for p in 0..hw {
                    let xh = (x[base + p] as f64 - mean[c]) * inv_std;
                    if record {
                        xhat[base + p] = xh as f32;
                    }
                    out[base + p] = (ga * xh + be) as f32;
                }
            }
        }
    }

    if training {
        // Update running buffers after computing the output.
        let mut rm = running_mean.values_mut();
        let mut rv = running_var.values_mut();
        for c in 0..xs.c {
            rm[c] = (momentum * rm[c] as f64 + (1.0 - momentum) * mean[c]) as f32;
            rv[c] = (momentum * rv[c] as f64 + (1.0 - momentum) * var[c]) as f32;
        }
    }

    let out = Tensor::from_vec(out_shape, out)?;
    out.ensure_finite("batch_norm")?;

    if record {
        let input_h = input.clone();
        let gamma_h = gamma.clone();
        let beta_h = beta.clone();
        let out_h = out.clone();
        let var_c = var.clone();
        tape.record("batch_norm", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let gv = gamma_h.values().clone();
            let mut dgamma = vec![0.0f64; xs.c];
            let mut dbeta = vec![0.0f64; xs.c];
            let mut dx = vec![0.0f32; xs.count()];
            for c in 0..xs.c {
                let inv_std = 1.0 / (var_c[c] + eps).sqrt();
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for n in 0..xs.n {
                    let base = xs.at(n, c, 0, 0);
                    for p in 0..hw {
                        let dy = g[base + p] as f64;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[base + p] as f64;
                    }
                }
                dbeta[c] = sum_dy;
                dgamma[c] = sum_dy_xhat;
                let ga = gv[c] as f64;
                if training {
                    let mean_dy = sum_dy / m;
                    let mean_dy_xhat = sum_dy_xhat / m;
                    for n in 0..xs.n {
                        let base = xs.at(n, c, 0, 0);
                        for p in 0..hw {
                            let dy = g[base + p] as f64;
                            let xh = xhat[base + p] as f64;
                            dx[base + p] =
                                (ga * inv_std * (dy - mean_dy - xh * mean_dy_xhat)) as f32;
                        }
                    }
                } else {
                    // Running stats are constants; the map is plain affine.
                    for n in 0..xs.n {
                        let base = xs.at(n, c, 0, 0);
                        for p in 0..hw {
                            dx[base + p] = (g[base + p] as f64 * ga * inv_std) as f32;
                        }
                    }
                }
            }
            input_h.accumulate_grad(&dx);
            let dg32: Vec<f32> = dgamma.iter().map(|&v| v as f32).collect();
            gamma_h.accumulate_grad(&dg32);
            let db32: Vec<f32> = dbeta.iter().map(|&v| v as f32).collect();
            beta_h.accumulate_grad(&db32);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// binary cross-entropy
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy over the batch.
///
/// `pred` must be `(N,1,1,1)` probabilities; `target` the same shape with
/// values exactly 0 or 1. Predictions are clamped to
/// `[BCE_EPSILON, 1−BCE_EPSILON]` before the logs; gradients are zero where
/// the clamp is active.
pub fn bce_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let ps = pred.shape();
    if ps.c != 1 || ps.h != 1 || ps.w != 1 {
        return Err(Error::Dimension(format!(
            "bce_loss expects predictions shaped (N,1,1,1), got {ps}"
        )));
    }
    if target.shape() != ps {
        return Err(Error::Dimension(format!(
            "bce_loss: target shape {} differs from predictions {ps}",
            target.shape()
        )));
    }
    if ps.n == 0 {
        return Err(Error::Value("bce_loss: empty batch".into()));
    }
    let n = ps.n;
    let lo = BCE_EPSILON;
    let hi = 1.0 - BCE_EPSILON;
    let mut acc = 0.0f64;
    {
        let p = pred.values();
        let t = target.values();
        for i in 0..n {
            let y = t[i];
            if y != 0.0 && y != 1.0 {
                return Err(Error::Value(format!(
                    "bce_loss: target[{i}] = {y} is not in {{0, 1}}"
                )));
            }
            let pc = (p[i] as f64).clamp(lo, hi);
            acc -= y as f64 * pc.ln() + (1.0 - y as f64) * (1.0 - pc).ln();
        }
    }
    let out = Tensor::scalar((acc / n as f64) as f32);
    out.ensure_finite("bce_loss")?;
    if tape.is_recording() {
        let pred_h = pred.clone();
        let target_h = target.clone();
        let out_h = out.clone();
        tape.record("bce_loss", &out, move || {
            let g = match out_h.grad() {
                Some(g) => g,
                None => return,
            };
            let gs = g[0] as f64;
            let p = pred_h.values().clone();
            let t = target_h.values().clone();
            let mut dp = vec![0.0f32; n];
            for i in 0..n {
                let praw = p[i] as f64;
                if praw < lo || praw > hi {
                    continue; // clamp active: zero gradient
                }
                let y = t[i] as f64;
                dp[i] = (gs * (praw - y) / (praw * (1.0 - praw) * n as f64)) as f32;
            }
            pred_h.accumulate_grad(&dp);
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), v: Vec<f32>) -> Tensor {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), v).unwrap()
    }

    #[test]
    fn conv2d_identity_like_kernel() {
        // [[1,2],[3,4]] cross-correlated with [[1,0],[0,1]] -> 1+4 = 5
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let w = t((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.values()[0], 5.0);
    }

    #[test]
    fn conv2d_ones_kernel_counts_window() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 3, 3), vec![1.0; 9]);
        let w = t((1, 1, 2, 2), vec![1.0; 4]);
        let y = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(*y.values(), vec![4.0; 4]);
    }

    #[test]
    fn conv2d_zero_padding_contributes_zeros() {
        // Single pixel, 3x3 ones kernel, padding 1: every tap except the
        // center reads a zero, so the output equals the input pixel.
        let mut tape = Tape::inference();
        let x = t((1, 1, 1, 1), vec![5.0]);
        let w = t((1, 1, 3, 3), vec![1.0; 9]);
        let y = conv2d(&mut tape, &x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.values()[0], 5.0);
    }

    #[test]
    fn conv2d_bias_and_stride() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 3, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t((1, 1, 1, 1), vec![2.0]);
        let b = Tensor::vector(vec![10.0]);
        let y = conv2d(&mut tape, &x, &w, Some(&b), 2, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(*y.values(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 2, 2), vec![0.0; 8]);
        let w = t((1, 3, 2, 2), vec![0.0; 12]);
        let err = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        let w = t((1, 1, 5, 5), vec![0.0; 25]);
        let err = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn depthwise_keeps_channels_independent() {
        let mut tape = Tape::inference();
        // Two channels; kernel for channel 0 doubles, for channel 1 negates.
        let x = t((1, 2, 1, 1), vec![3.0, 4.0]);
        let w = t((2, 1, 1, 1), vec![2.0, -1.0]);
        let y = depthwise_conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(*y.values(), vec![6.0, -4.0]);
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 2, 2), vec![0.0; 8]);
        let w = t((3, 1, 2, 2), vec![0.0; 12]);
        let err = depthwise_conv2d(&mut tape, &x, &w, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn pointwise_is_per_pixel_channel_mix() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        // out = 1*ch0 + 10*ch1
        let w = t((1, 2, 1, 1), vec![1.0, 10.0]);
        let y = pointwise_conv2d(&mut tape, &x, &w, None).unwrap();
        assert_eq!(*y.values(), vec![31.0, 42.0]);
    }

    #[test]
    fn pointwise_rejects_non_1x1() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        let w = t((1, 1, 2, 2), vec![0.0; 4]);
        assert!(pointwise_conv2d(&mut tape, &x, &w, None).is_err());
    }

    #[test]
    fn pooling_hand_values() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let mx = max_pool2d(&mut tape, &x, 2, 2).unwrap();
        assert_eq!(*mx.values(), vec![4.0]);
        let av = avg_pool2d(&mut tape, &x, 2, 2).unwrap();
        assert_eq!(*av.values(), vec![2.5]);
        let ga = global_avg_pool(&mut tape, &x).unwrap();
        assert_eq!(*ga.values(), vec![2.5]);
        let gm = global_max_pool(&mut tape, &x).unwrap();
        assert_eq!(*gm.values(), vec![4.0]);
    }

    #[test]
    fn pooling_rejects_oversized_window() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        assert!(matches!(
            max_pool2d(&mut tape, &x, 3, 1).unwrap_err(),
            Error::Geometry(_)
        ));
        assert!(matches!(
            avg_pool2d(&mut tape, &x, 3, 1).unwrap_err(),
            Error::Geometry(_)
        ));
    }

    #[test]
    fn dense_hand_value() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 1, 1), vec![2.0, 3.0]);
        let w = t((1, 2, 1, 1), vec![1.0, 1.0]);
        let y = dense(&mut tape, &x, &w, None).unwrap();
        assert_eq!(*y.values(), vec![5.0]);
        let b = Tensor::vector(vec![0.5]);
        let y = dense(&mut tape, &x, &w, Some(&b)).unwrap();
        assert_eq!(*y.values(), vec![5.5]);
    }

    #[test]
    fn dense_rejects_spatial_input() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 2, 1), vec![0.0; 4]);
        let w = t((1, 2, 1, 1), vec![0.0; 2]);
        assert!(matches!(
            dense(&mut tape, &x, &w, None).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    #[test]
    fn elementwise_hand_values() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(*relu(&mut tape, &x).unwrap().values(), vec![0.0, 0.0, 2.0]);
        let s = sigmoid(&mut tape, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(s.values()[0], 0.5);
        let ones = t((1, 1, 1, 3), vec![1.0; 3]);
        assert_eq!(
            *mul_broadcast(&mut tape, &x, &ones).unwrap().values(),
            vec![-1.0, 0.0, 2.0]
        );
    }

    #[test]
    fn add_requires_same_shape() {
        let mut tape = Tape::inference();
        let a = t((1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t((1, 1, 2, 1), vec![1.0, 2.0]);
        assert!(add(&mut tape, &a, &b).is_err());
        let c = add(&mut tape, &a, &a).unwrap();
        assert_eq!(*c.values(), vec![2.0, 4.0]);
    }

    #[test]
    fn mul_broadcast_channel_scale() {
        let mut tape = Tape::inference();
        // (1,2,1,1) against (1,2,2,1)
        let scale = t((1, 2, 1, 1), vec![2.0, 3.0]);
        let x = t((1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]);
        let y = mul_broadcast(&mut tape, &scale, &x).unwrap();
        assert_eq!(*y.values(), vec![2.0, 4.0, 9.0, 12.0]);
    }

    #[test]
    fn mul_broadcast_rejects_incompatible() {
        let mut tape = Tape::inference();
        let a = t((1, 2, 1, 1), vec![1.0, 2.0]);
        let b = t((1, 3, 1, 1), vec![1.0, 2.0, 3.0]);
        assert!(mul_broadcast(&mut tape, &a, &b).is_err());
    }

    #[test]
    fn concat_channel_bookkeeping() {
        let mut tape = Tape::inference();
        let a = t((1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t((1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]);
        let y = concat_channels(&mut tape, &a, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(*y.values(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn channel_stats_hand_values() {
        let mut tape = Tape::inference();
        let x = t((1, 2, 1, 2), vec![1.0, 2.0, 3.0, 8.0]);
        let mean = channel_mean(&mut tape, &x).unwrap();
        assert_eq!(*mean.values(), vec![2.0, 5.0]);
        let max = channel_max(&mut tape, &x).unwrap();
        assert_eq!(*max.values(), vec![3.0, 8.0]);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut tape = Tape::inference();
        let x = t((2, 1, 1, 2), vec![7.0; 4]);
        let gamma = Tensor::vector(vec![3.0]);
        let beta = Tensor::vector(vec![0.25]);
        let rm = Tensor::vector(vec![0.0]);
        let rv = Tensor::vector(vec![1.0]);
        let y = batch_norm(&mut tape, &x, &gamma, &beta, &rm, &rv, true, 0.9, 1e-5).unwrap();
        for &v in y.values().iter() {
            assert!((v - 0.25).abs() < 1e-5, "got {v}");
        }
        // Running stats moved toward the batch stats.
        assert!((rm.values()[0] - 0.7).abs() < 1e-6);
        assert!((rv.values()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 1, 2), vec![1.0, 3.0]);
        let gamma = Tensor::vector(vec![1.0]);
        let beta = Tensor::vector(vec![0.0]);
        let rm = Tensor::vector(vec![1.0]);
        let rv = Tensor::vector(vec![4.0]);
        let y = batch_norm(&mut tape, &x, &gamma, &beta, &rm, &rv, false, 0.9, 1e-5).unwrap();
        let v = y.values();
        assert!((v[0] - 0.0).abs() < 1e-5);
        assert!((v[1] - 1.0).abs() < 1e-3); // 2 / sqrt(4 + 1e-5)
        // Buffers untouched in inference mode.
        assert_eq!(rm.values()[0], 1.0);
        assert_eq!(rv.values()[0], 4.0);
    }

    #[test]
    fn bce_hand_value_and_validation() {
        let mut tape = Tape::inference();
        let p = t((2, 1, 1, 1), vec![0.9, 0.1]);
        let y = t((2, 1, 1, 1), vec![1.0, 0.0]);
        let loss = bce_loss(&mut tape, &p, &y).unwrap();
        assert!((loss.values()[0] as f64 - 0.10536051565782628).abs() < 1e-6);

        let bad = t((2, 1, 1, 1), vec![1.0, 0.5]);
        assert!(matches!(
            bce_loss(&mut tape, &p, &bad).unwrap_err(),
            Error::Value(_)
        ));
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        let mut tape = Tape::inference();
        let p = t((2, 1, 1, 1), vec![0.0, 1.0]);
        let y = t((2, 1, 1, 1), vec![0.0, 1.0]);
        let loss = bce_loss(&mut tape, &p, &y).unwrap();
        assert!(loss.values()[0].is_finite());
        // Correct saturated predictions: loss ≈ −ln(1−ε) ≈ ε
        assert!(loss.values()[0] < 1e-5);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::inference();
        let a = t((1, 1, 1, 1), vec![f32::MAX]);
        let err = add(&mut tape, &a, &a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add", .. }));
    }

    #[test]
    fn sum_all_scalar() {
        let mut tape = Tape::inference();
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let s = sum_all(&mut tape, &x).unwrap();
        assert_eq!(s.values()[0], 10.0);
    }

    #[test]
    fn conv_shape_formula_property() {
        // Output extents follow (in + 2p - k)/s + 1 for every valid combo.
        let mut tape = Tape::inference();
        for h in 1..=7usize {
            for k in 1..=h {
                for s in 1..=3usize {
                    for p in 0..=2usize {
                        if h + 2 * p < k {
                            continue;
                        }
                        let x = Tensor::zeros(Shape::new(1, 1, h, h));
                        let w = Tensor::zeros(Shape::new(1, 1, k, k));
                        let y = conv2d(&mut tape, &x, &w, None, s, p).unwrap();
                        let expect = (h + 2 * p - k) / s + 1;
                        assert_eq!(y.shape().h, expect);
                        assert_eq!(y.shape().w, expect);
                    }
                }
            }
        }
    }
}
