//! Dense-vs-pruned attention benchmarking: exact MAC accounting plus
//! wall-clock timing of f32 forward kernels on identical inputs.
//!
//! Timing numbers are medians over warm runs and are machine-dependent;
//! only the MAC counts are contractual.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dpsa::{attention_term_macs, count_attention_macs, default_n_s, rank_top};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    /// None picks the default floor(sqrt(H)).
    pub n_s: Option<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { height: 32, width: 32, channels: 64, heads: 4, n_s: None, trials: 7, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    pub n_s: usize,
    pub trials: usize,
    pub dense_macs: u64,
    pub dpsa_macs: u64,
    pub dense_ms: f64,
    pub dpsa_ms: f64,
}

impl BenchResult {
    /// Total pruned cost (attention + scoring) over the dense cost.
    pub fn mac_ratio(&self) -> f64 {
        self.dpsa_macs as f64 / self.dense_macs as f64
    }

    /// Attention-term-only ratio n_s^2 / N; equals H/N when n_s^2 == H.
    pub fn attention_term_ratio(&self) -> f64 {
        attention_term_macs(self.height, self.width, self.channels, self.n_s) as f64
            / self.dense_macs as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.dpsa_ms / self.dense_ms
    }

    pub const CSV_HEADER: &'static str =
        "height,width,channels,heads,n_s,trials,dense_macs,dpsa_macs,dense_ms,dpsa_ms";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.height,
            self.width,
            self.channels,
            self.heads,
            self.n_s,
            self.trials,
            self.dense_macs,
            self.dpsa_macs,
            self.dense_ms,
            self.dpsa_ms
        )
    }

    pub fn from_csv_row(row: &str) -> Result<BenchResult> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::config(format!("CSV row has {} fields, want 10", f.len())));
        }
        let u = |i: usize| -> Result<usize> {
            f[i].parse().map_err(|_| Error::config(format!("bad integer field {i}: {}", f[i])))
        };
        let u64_ = |i: usize| -> Result<u64> {
            f[i].parse().map_err(|_| Error::config(format!("bad integer field {i}: {}", f[i])))
        };
        let fl = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::config(format!("bad float field {i}: {}", f[i])))
        };
        Ok(BenchResult {
            height: u(0)?,
            width: u(1)?,
            channels: u(2)?,
            heads: u(3)?,
            n_s: u(4)?,
            trials: u(5)?,
            dense_macs: u64_(6)?,
            dpsa_macs: u64_(7)?,
            dense_ms: fl(8)?,
            dpsa_ms: fl(9)?,
        })
    }
}

fn l2_normalize_rows_f32(x: &mut [f32], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            for v in row {
                *v /= n;
            }
        }
    }
}

/// Softmax(Q . keys^T) . values for one head; `keys`/`values` hold
/// `kept` rows. Shared by the dense and pruned paths so that a full
/// pruning budget reproduces dense output bit for bit.
fn attend_f32(q: &[f32], keys: &[f32], values: &[f32], n: usize, kept: usize, d: usize, out: &mut [f32]) {
    let mut logits = vec![0.0f32; kept];
    for i in 0..n {
        let qr = &q[i * d..(i + 1) * d];
        for (j, l) in logits.iter_mut().enumerate() {
            let kr = &keys[j * d..(j + 1) * d];
            *l = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
        }
        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z += *l;
        }
        let inv = 1.0 / z;
        let orow = &mut out[i * d..(i + 1) * d];
        orow.fill(0.0);
        for (j, &w) in logits.iter().enumerate() {
            let vr = &values[j * d..(j + 1) * d];
            let wn = w * inv;
            for (o, &vv) in orow.iter_mut().zip(vr) {
                *o += wn * vv;
            }
        }
    }
}

/// Dense temperature-free attention over all N tokens, per head.
pub fn dense_attention_f32(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n: usize,
    c: usize,
    heads: usize,
) -> Vec<f32> {
    let d = c / heads;
    let mut out = vec![0.0f32; n * c];
    let mut qh = vec![0.0f32; n * d];
    let mut kh = vec![0.0f32; n * d];
    let mut vh = vec![0.0f32; n * d];
    let mut oh = vec![0.0f32; n * d];
    for h in 0..heads {
        split_head(q, &mut qh, n, c, d, h);
        split_head(k, &mut kh, n, c, d, h);
        split_head(v, &mut vh, n, c, d, h);
        l2_normalize_rows_f32(&mut qh, d);
        l2_normalize_rows_f32(&mut kh, d);
        attend_f32(&qh, &kh, &vh, n, n, d, &mut oh);
        merge_head(&oh, &mut out, n, c, d, h);
    }
    out
}

/// Pruned attention: factored row/column scoring, top-n_s selection, then
/// attention over the n_s^2 kept tokens.
pub fn dpsa_attention_f32(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    height: usize,
    width: usize,
    c: usize,
    heads: usize,
    n_s: usize,
) -> Vec<f32> {
    let n = height * width;
    let d = c / heads;
    let mut out = vec![0.0f32; n * c];
    let mut qh = vec![0.0f32; n * d];
    let mut kh = vec![0.0f32; n * d];
    let mut vh = vec![0.0f32; n * d];
    let mut oh = vec![0.0f32; n * d];
    for h in 0..heads {
        split_head(q, &mut qh, n, c, d, h);
        split_head(k, &mut kh, n, c, d, h);
        split_head(v, &mut vh, n, c, d, h);
        l2_normalize_rows_f32(&mut qh, d);
        l2_normalize_rows_f32(&mut kh, d);
        // factored scores
        let mut sum_q = vec![0.0f64; d];
        for row in qh.chunks_exact(d) {
            for (s, &x) in sum_q.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let mut row_sums = vec![0.0f64; height * d];
        let mut col_sums = vec![0.0f64; width * d];
        for (i, row) in kh.chunks_exact(d).enumerate() {
            let r = i / width;
            let cc = i % width;
            for (j, &x) in row.iter().enumerate() {
                row_sums[r * d + j] += x as f64;
                col_sums[cc * d + j] += x as f64;
            }
        }
        let dot = |g: &[f64]| -> f64 { sum_q.iter().zip(g).map(|(a, b)| a * b).sum() };
        let row_scores: Vec<f64> = row_sums.chunks_exact(d).map(dot).collect();
        let col_scores: Vec<f64> = col_sums.chunks_exact(d).map(dot).collect();
        let mut rows = rank_top(&row_scores, n_s);
        let mut cols = rank_top(&col_scores, n_s);
        rows.sort_unstable();
        cols.sort_unstable();
        let kept = n_s * n_s;
        let mut ks = vec![0.0f32; kept * d];
        let mut vs = vec![0.0f32; kept * d];
        let mut slot = 0;
        for &r in &rows {
            for &cc in &cols {
                let t = r * width + cc;
                ks[slot * d..(slot + 1) * d].copy_from_slice(&kh[t * d..(t + 1) * d]);
                vs[slot * d..(slot + 1) * d].copy_from_slice(&vh[t * d..(t + 1) * d]);
                slot += 1;
            }
        }
        attend_f32(&qh, &ks, &vs, n, kept, d, &mut oh);
        merge_head(&oh, &mut out, n, c, d, h);
    }
    out
}

fn split_head(src: &[f32], dst: &mut [f32], n: usize, c: usize, d: usize, h: usize) {
    for i in 0..n {
        dst[i * d..(i + 1) * d].copy_from_slice(&src[i * c + h * d..i * c + (h + 1) * d]);
    }
}

fn merge_head(src: &[f32], dst: &mut [f32], n: usize, c: usize, d: usize, h: usize) {
    for i in 0..n {
        dst[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
    }
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Runs both kernels on identical random inputs and reports exact MACs
/// plus median wall time. With a full pruning budget the outputs are
/// verified to agree.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult> {
    if spec.height == 0 || spec.width == 0 || spec.channels == 0 || spec.heads == 0 {
        return Err(Error::config("bench dimensions must be positive"));
    }
    if spec.channels % spec.heads != 0 {
        return Err(Error::config(format!(
            "heads {} must divide channels {}",
            spec.heads, spec.channels
        )));
    }
    let trials = spec.trials.max(5);
    let n = spec.height * spec.width;
    let c = spec.channels;
    let n_s = match spec.n_s {
        Some(v) => {
            if v == 0 || v > spec.height.min(spec.width) {
                return Err(Error::config(format!(
                    "n_s {v} out of range 1..={}",
                    spec.height.min(spec.width)
                )));
            }
            v
        }
        None => default_n_s(spec.height, spec.width),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gen = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let q = gen(n * c);
    let k = gen(n * c);
    let v = gen(n * c);

    // correctness: full budget must reproduce dense attention
    if n_s == spec.height && n_s == spec.width {
        let a = dense_attention_f32(&q, &k, &v, n, c, spec.heads);
        let b = dpsa_attention_f32(&q, &k, &v, spec.height, spec.width, c, spec.heads, n_s);
        for (x, y) in a.iter().zip(b.iter()) {
            if (x - y).abs() > 1e-5 {
                return Err(Error::config(format!(
                    "full-budget pruned attention diverged from dense: {x} vs {y}"
                )));
            }
        }
    }

    let _ = dense_attention_f32(&q, &k, &v, n, c, spec.heads); // warm
    let mut dense_times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        let out = dense_attention_f32(&q, &k, &v, n, c, spec.heads);
        dense_times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let _ = dpsa_attention_f32(&q, &k, &v, spec.height, spec.width, c, spec.heads, n_s);
    let mut dpsa_times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        let out = dpsa_attention_f32(&q, &k, &v, spec.height, spec.width, c, spec.heads, n_s);
        dpsa_times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }

    let (dense_macs, dpsa_macs) = count_attention_macs(spec.height, spec.width, c, spec.heads, n_s);
    Ok(BenchResult {
        height: spec.height,
        width: spec.width,
        channels: c,
        heads: spec.heads,
        n_s,
        trials,
        dense_macs,
        dpsa_macs,
        dense_ms: median_ms(&mut dense_times),
        dpsa_ms: median_ms(&mut dpsa_times),
    })
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = BenchSpec { height: 8, width: 8, channels: 16, heads: 2, trials: 5, ..Default::default() };
        let r = run_bench(&spec).unwrap();
        let row = r.to_csv_row();
        let back = BenchResult::from_csv_row(&row).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn full_budget_matches_dense_bitwise() {
        let n = 36;
        let c = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense = dense_attention_f32(&q, &k, &v, n, c, 2);
        let pruned = dpsa_attention_f32(&q, &k, &v, 6, 6, c, 2, 6);
        assert_eq!(dense, pruned);
    }

    #[test]
    fn single_cell_grid_attention_ratio_is_one() {
        let (dense, _) = count_attention_macs(1, 1, 8, 1, 1);
        let att = crate::dpsa::attention_term_macs(1, 1, 8, 1);
        assert_eq!(att as f64 / dense as f64, 1.0);
    }

    #[test]
    fn perfect_square_ratio_is_h_over_n() {
        // 32x32 grid, n_s = sqrt(32) truncated... use H=W in {16, 64}:
        for h in [16usize, 64] {
            let n_s = (h as f64).sqrt() as usize;
            let (dense, _) = count_attention_macs(h, h, 64, 4, n_s);
            let att = crate::dpsa::attention_term_macs(h, h, 64, n_s);
            let want = h as f64 / (h * h) as f64;
            assert!((att as f64 / dense as f64 - want).abs() < 1e-15);
        }
    }

    #[test]
    fn loglog_slopes_fixed_budget() {
        // fixed n_s, growing W at fixed H: pruned cost is linear in N while
        // dense is quadratic
        let h = 16usize;
        let mut ns_vec = Vec::new();
        let mut dpsa_vec = Vec::new();
        let mut dense_vec = Vec::new();
        for w in [16usize, 64, 256] {
            let (dense, dpsa) = count_attention_macs(h, w, 64, 4, 4);
            ns_vec.push((h * w) as f64);
            dense_vec.push(dense as f64);
            dpsa_vec.push(dpsa as f64);
        }
        let s_dense = fit_loglog_slope(&ns_vec, &dense_vec);
        let s_dpsa = fit_loglog_slope(&ns_vec, &dpsa_vec);
        assert!((s_dense - 2.0).abs() < 0.05, "dense slope {s_dense}");
        assert!((s_dpsa - 1.0).abs() < 0.05, "pruned slope {s_dpsa}");
    }

    #[test]
    fn sweep_with_default_budget_grows_subquadratically() {
        // default n_s = sqrt(H) on square grids: pruned cost ~ N^1.5
        let mut ns_vec = Vec::new();
        let mut dpsa_vec = Vec::new();
        for h in [16usize, 64, 256] {
            let n_s = (h as f64).sqrt() as usize;
            let (_, dpsa) = count_attention_macs(h, h, 64, 4, n_s);
            ns_vec.push((h * h) as f64);
            dpsa_vec.push(dpsa as f64);
        }
        let s = fit_loglog_slope(&ns_vec, &dpsa_vec);
        assert!((s - 1.5).abs() < 0.05, "expected ~N^1.5 growth, got slope {s}");
    }

    #[test]
    fn timing_fields_populated() {
        let spec = BenchSpec { height: 8, width: 8, channels: 16, heads: 2, trials: 5, ..Default::default() };
        let r = run_bench(&spec).unwrap();
        assert!(r.dense_ms > 0.0 && r.dpsa_ms > 0.0);
        assert_eq!(r.n_s, 2);
        assert!(r.mac_ratio() < 1.0);
    }

    #[test]
    fn bad_spec_rejected() {
        let spec = BenchSpec { heads: 3, channels: 16, ..Default::default() };
        assert!(run_bench(&spec).is_err());
        let spec = BenchSpec { n_s: Some(99), ..Default::default() };
        assert!(run_bench(&spec).is_err());
    }
}
