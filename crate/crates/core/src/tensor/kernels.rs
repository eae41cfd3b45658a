//! Raw numeric kernels: matrix products, im2col convolution, padding,
//! normalization, softmax. Pure functions over slices; the tape calls
//! these for both forward and backward passes.
//!
//! All loops are single-threaded with a fixed iteration order, so results
//! are bit-identical across runs.

use crate::error::{Error, Result};

// ── matrix products ──────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n] (+= when `acc`).
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(0.0);
    }
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..l * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T (+= when `acc`).
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..j * k + k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                s += av * bv;
            }
            if acc {
                *o += s;
            } else {
                *o = s;
            }
        }
    }
}

/// C[m,n] = A[k,m]^T * B[k,n] (+= when `acc`).
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(0.0);
    }
    for l in 0..k {
        let a_row = &a[l * m..l * m + m];
        let b_row = &b[l * n..l * n + n];
        for (i, &a_li) in a_row.iter().enumerate() {
            if a_li == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..i * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_li * bv;
            }
        }
    }
}

// ── padding ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Reflect,
    Replicate,
    Zero,
}

/// Maps a padded coordinate (may be negative / past the end) to the source
/// index, or None for zero fill.
#[inline]
fn pad_src(idx: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if idx >= 0 && idx < n {
        return Some(idx as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Replicate => Some(idx.clamp(0, n - 1) as usize),
        PadMode::Reflect => {
            // mirror without repeating the edge sample: -1 -> 1, n -> n-2
            let r = if idx < 0 { -idx } else { 2 * n - 2 - idx };
            Some(r as usize)
        }
    }
}

pub fn check_pad(pad: usize, h: usize, w: usize, mode: PadMode) -> Result<()> {
    if mode == PadMode::Reflect && (pad >= h || pad >= w) {
        return Err(Error::config(format!(
            "reflection padding {pad} needs input extent > pad, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Pads each channel of a [C,H,W] tensor by `pad` on every side.
pub fn pad2d_fwd(x: &[f64], c: usize, h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<f64> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for i in 0..hp {
            let si = pad_src(i as isize - pad as isize, h, mode);
            for j in 0..wp {
                let sj = pad_src(j as isize - pad as isize, w, mode);
                if let (Some(si), Some(sj)) = (si, sj) {
                    dst[i * wp + j] = src[si * w + sj];
                }
            }
        }
    }
    out
}

/// Accumulates the gradient of a padded tensor back onto the source grid.
pub fn pad2d_bwd(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    mode: PadMode,
    dx: &mut [f64],
) {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    for ch in 0..c {
        let g = &dy[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..hp {
            let si = match pad_src(i as isize - pad as isize, h, mode) {
                Some(s) => s,
                None => continue,
            };
            for j in 0..wp {
                if let Some(sj) = pad_src(j as isize - pad as isize, w, mode) {
                    dst[si * w + sj] += g[i * wp + j];
                }
            }
        }
    }
}

// ── convolution via im2col ───────────────────────────────────────────

pub fn conv_out_dim(input: usize, k: usize, stride: usize) -> usize {
    (input - k) / stride + 1
}

/// Unfolds [C,H,W] into a [C*k*k, OH*OW] column matrix (valid convolution).
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize) -> Vec<f64> {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(w, k, stride);
    let mut cols = vec![0.0; c * k * k * oh * ow];
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * ohw..][..ohw];
                for oi in 0..oh {
                    let src = &plane[(oi * stride + ki) * w + kj..];
                    let dst = &mut row[oi * ow..oi * ow + ow];
                    for (d, oj) in dst.iter_mut().zip(0..ow) {
                        *d = src[oj * stride];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a [C*k*k, OH*OW] column-gradient back to the input grid.
pub fn col2im(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(w, k, stride);
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &dcols[((ch * k + ki) * k + kj) * ohw..][..ohw];
                for oi in 0..oh {
                    let base = (oi * stride + ki) * w + kj;
                    let src = &row[oi * ow..oi * ow + ow];
                    for (oj, &g) in src.iter().enumerate() {
                        plane[base + oj * stride] += g;
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation: y[Cout,OH,OW] from x[Cin,H,W], w[Cout,Cin,k,k], b[Cout].
pub fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c_in: usize,
    h: usize,
    width: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(width, k, stride);
    let ohw = oh * ow;
    let cols = im2col(x, c_in, h, width, k, stride);
    let mut y = vec![0.0; c_out * ohw];
    mm_nn(w, &cols, c_out, c_in * k * k, ohw, &mut y, false);
    for (co, plane) in y.chunks_exact_mut(ohw).enumerate() {
        let bias = b[co];
        for v in plane {
            *v += bias;
        }
    }
    y
}

/// Backward of `conv2d_fwd`. Recomputes im2col rather than storing it.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    c_in: usize,
    h: usize,
    width: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(width, k, stride);
    let ohw = oh * ow;
    let ckk = c_in * k * k;
    for (co, plane) in dy.chunks_exact(ohw).enumerate() {
        db[co] += plane.iter().sum::<f64>();
    }
    let cols = im2col(x, c_in, h, width, k, stride);
    // dW[Cout, ckk] += dY[Cout, ohw] * cols[ckk, ohw]^T
    mm_nt(dy, &cols, c_out, ohw, ckk, dw, true);
    // dcols[ckk, ohw] = W[Cout, ckk]^T * dY[Cout, ohw]
    let mut dcols = vec![0.0; ckk * ohw];
    mm_tn(w, dy, ckk, c_out, ohw, &mut dcols, false);
    col2im(&dcols, c_in, h, width, k, stride, dx);
}

/// Depthwise valid cross-correlation: one k x k kernel per channel.
pub fn depthwise_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    width: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(width, k, stride);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * width..(ch + 1) * h * width];
        let ker = &w[ch * k * k..(ch + 1) * k * k];
        let out = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        let bias = b[ch];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut s = bias;
                for ki in 0..k {
                    let row = &plane[(oi * stride + ki) * width + oj * stride..][..k];
                    let krow = &ker[ki * k..ki * k + k];
                    for (&xv, &kv) in row.iter().zip(krow.iter()) {
                        s += xv * kv;
                    }
                }
                out[oi * ow + oj] = s;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_bwd(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    c: usize,
    h: usize,
    width: usize,
    k: usize,
    stride: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(width, k, stride);
    for ch in 0..c {
        let plane = &x[ch * h * width..(ch + 1) * h * width];
        let ker = &w[ch * k * k..(ch + 1) * k * k];
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dplane = &mut dx[ch * h * width..(ch + 1) * h * width];
        let dker = &mut dw[ch * k * k..(ch + 1) * k * k];
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = g[oi * ow + oj];
                if gv == 0.0 {
                    continue;
                }
                db[ch] += gv;
                for ki in 0..k {
                    for kj in 0..k {
                        let xi = (oi * stride + ki) * width + oj * stride + kj;
                        dker[ki * k + kj] += gv * plane[xi];
                        dplane[xi] += gv * ker[ki * k + kj];
                    }
                }
            }
        }
    }
}

// ── normalization & softmax ──────────────────────────────────────────

/// Per-channel standardization of [C,H,W]: (x - mean) / sqrt(var + eps).
pub fn instance_norm_fwd(x: &[f64], c: usize, hw: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let dst = &mut y[ch * hw..(ch + 1) * hw];
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = (s - mean) * inv;
        }
    }
    y
}

pub fn instance_norm_bwd(dy: &[f64], x: &[f64], c: usize, hw: usize, eps: f64, dx: &mut [f64]) {
    let n = hw as f64;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let g = &dy[ch * hw..(ch + 1) * hw];
        let dst = &mut dx[ch * hw..(ch + 1) * hw];
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for (&gv, &xv) in g.iter().zip(src.iter()) {
            g_mean += gv;
            gx_mean += gv * (xv - mean) * inv;
        }
        g_mean /= n;
        gx_mean /= n;
        for ((d, &gv), &xv) in dst.iter_mut().zip(g.iter()).zip(src.iter()) {
            let xhat = (xv - mean) * inv;
            *d += inv * (gv - g_mean - xhat * gx_mean);
        }
    }
}

/// Row-wise softmax of an [R,C] matrix.
pub fn softmax_rows_fwd(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            let e = (s - m).exp();
            *d = e;
            z += e;
        }
        let inv = 1.0 / z;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    debug_assert_eq!(rows * cols, x.len());
    y
}

pub fn softmax_rows_bwd(dy: &[f64], y: &[f64], cols: usize, dx: &mut [f64]) {
    for ((g, yv), d) in dy
        .chunks_exact(cols)
        .zip(y.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: f64 = g.iter().zip(yv.iter()).map(|(&a, &b)| a * b).sum();
        for ((dv, &gv), &yvv) in d.iter_mut().zip(g.iter()).zip(yv.iter()) {
            *dv += yvv * (gv - dot);
        }
    }
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn l2_normalize_rows_fwd(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let inv = 1.0 / norm;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = s * inv;
        }
    }
    y
}

pub fn l2_normalize_rows_bwd(dy: &[f64], x: &[f64], cols: usize, dx: &mut [f64]) {
    for ((g, src), d) in dy
        .chunks_exact(cols)
        .zip(x.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue; // subgradient at the degenerate point: zero
        }
        let inv = 1.0 / norm;
        let dot: f64 = g.iter().zip(src.iter()).map(|(&a, &b)| a * b).sum();
        let scale = dot * inv * inv * inv;
        for ((dv, &gv), &xv) in d.iter_mut().zip(g.iter()).zip(src.iter()) {
            *dv += gv * inv - xv * scale;
        }
    }
}

/// Mean over rows of -log softmax(row)[row index]; logits must be square.
/// Returns (loss, per-row softmax) so backward can reuse the probabilities.
pub fn cross_entropy_diag_fwd(logits: &[f64], s: usize) -> (f64, Vec<f64>) {
    let probs = softmax_rows_fwd(logits, s, s);
    let mut loss = 0.0;
    for (r, row) in logits.chunks_exact(s).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[r];
    }
    (loss / s as f64, probs)
}

pub fn cross_entropy_diag_bwd(g: f64, probs: &[f64], s: usize, dx: &mut [f64]) {
    let scale = g / s as f64;
    for (r, (row, drow)) in probs.chunks_exact(s).zip(dx.chunks_exact_mut(s)).enumerate() {
        for (j, (&p, d)) in row.iter().zip(drow.iter_mut()).enumerate() {
            let target = if j == r { 1.0 } else { 0.0 };
            *d += (p - target) * scale;
        }
    }
}

// ── resampling helpers used by elementwise ops ───────────────────────

pub fn upsample_nearest_fwd(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let oh = h * f;
    let ow = w * f;
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            let si = i / f;
            for j in 0..ow {
                dst[i * ow + j] = src[si * w + j / f];
            }
        }
    }
    y
}

pub fn upsample_nearest_bwd(dy: &[f64], c: usize, h: usize, w: usize, f: usize, dx: &mut [f64]) {
    let oh = h * f;
    let ow = w * f;
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let si = i / f;
            for j in 0..ow {
                dst[si * w + j / f] += g[i * ow + j];
            }
        }
    }
}

// ── scalar nonlinearities ────────────────────────────────────────────

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    phi(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// log(sigmoid(x)) = -softplus(-x), overflow-safe for any finite x.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// d/dx log(sigmoid(x)) = sigmoid(-x).
#[inline]
pub fn log_sigmoid_grad(x: f64) -> f64 {
    1.0 / (1.0 + x.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // A * B == (B^T stored row-major) via mm_nt
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut c2, false);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // A^T^T * B via mm_tn on A^T
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_tn(&at, &b, m, k, n, &mut c3, false);
        for (x, y) in c.iter().zip(c3.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_pad_indexing() {
        // [0 1 2 3] padded by 2 -> [2 1 0 1 2 3 2 1]
        let x = [0.0, 1.0, 2.0, 3.0];
        let p = pad2d_fwd(&x, 1, 1, 4, 0, PadMode::Reflect);
        assert_eq!(p, x); // pad 0 is identity
        let idx: Vec<Option<usize>> = (-2..6).map(|i| pad_src(i, 4, PadMode::Reflect)).collect();
        assert_eq!(
            idx,
            vec![
                Some(2),
                Some(1),
                Some(0),
                Some(1),
                Some(2),
                Some(3),
                Some(2),
                Some(1)
            ]
        );
    }

    #[test]
    fn replicate_and_zero_pad_indexing() {
        assert_eq!(pad_src(-3, 4, PadMode::Replicate), Some(0));
        assert_eq!(pad_src(6, 4, PadMode::Replicate), Some(3));
        assert_eq!(pad_src(-1, 4, PadMode::Zero), None);
        assert_eq!(pad_src(4, 4, PadMode::Zero), None);
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let w = [1.0];
        let b = [0.0];
        let y = conv2d_fwd(&x, &w, &b, 1, 4, 4, 1, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(6.0) - 6.0).abs() < 1e-6);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-745.0).is_finite());
        assert!(log_sigmoid(745.0) < 0.0);
    }
}
