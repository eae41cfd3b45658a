//! Dual Pruned Self-Attention.
//!
//! Tokens of an H x W grid are scored by row and by column using the
//! factored form `(sum of all queries) . (sum of keys in the group)`, the
//! top `n_s` rows and columns are kept, and temperature-free attention is
//! computed between every query and the `n_s * n_s` keys/values at the
//! row/column intersections. With `n_s = sqrt(H)` the attention term costs
//! N*H*C multiply-accumulates instead of the dense N*N*C.
//!
//! Scoring and index selection happen off-tape: the selection is treated
//! as a constant in the backward pass, so gradients flow only through the
//! kept tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Registered};
use crate::tensor::{NodeId, Tape};

/// A bottleneck feature map viewed as H*W tokens of dimension C.
/// `tokens` is an [N, C] matrix in row-major grid order: grid position
/// (r, c) lives at flat row r*W + c.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub tokens: NodeId,
}

impl TokenGrid {
    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionHeadConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Overrides the default n_s = floor(sqrt(H)); used by the no-pruning
    /// oracle mode.
    pub n_s_override: Option<usize>,
    /// Row-normalize Q and K before scoring and attention (ablation toggle).
    pub l2_normalize: bool,
}

impl AttentionHeadConfig {
    pub fn new(channels: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || channels % num_heads != 0 {
            return Err(Error::config(format!(
                "num_heads {num_heads} must divide channels {channels}"
            )));
        }
        Ok(AttentionHeadConfig {
            num_heads,
            head_dim: channels / num_heads,
            n_s_override: None,
            l2_normalize: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Ranked row/column indices and the pruning budget that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSelection {
    pub row_scores: Vec<f64>,
    pub col_scores: Vec<f64>,
    /// Row indices ranked by descending score (ties broken by lower index).
    pub index_r: Vec<usize>,
    /// Column indices ranked the same way.
    pub index_c: Vec<usize>,
    pub n_s: usize,
}

impl PruneSelection {
    /// Flat token indices of the selected row/column intersections, in
    /// (sorted-row, sorted-column) ascending order.
    pub fn token_indices(&self, w: usize) -> Vec<usize> {
        let mut rows = self.index_r.clone();
        let mut cols = self.index_c.clone();
        rows.sort_unstable();
        cols.sort_unstable();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                out.push(r * w + c);
            }
        }
        out
    }
}

/// Default pruning budget: floor(sqrt(H)), at least 1, at most min(H, W).
pub fn default_n_s(h: usize, w: usize) -> usize {
    let raw = (h as f64).sqrt().floor() as usize;
    raw.max(1).min(h).min(w)
}

/// Row and column token scores in the factored form: the full double sum
/// `sum_i sum_j q_i . k_(group j)` collapses to
/// `(sum_i q_i) . (sum_j k_(group j))`.
pub fn score_tokens(
    q: &[f64],
    k: &[f64],
    d: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = h * w;
    if q.len() != n * d || k.len() != n * d {
        return Err(Error::ShapeMismatch {
            op: "score_tokens",
            lhs: vec![q.len() / d.max(1), d],
            rhs: vec![h, w],
        });
    }
    let mut sum_q = vec![0.0; d];
    for row in q.chunks_exact(d) {
        for (s, &v) in sum_q.iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    let mut row_sums = vec![0.0; h * d];
    let mut col_sums = vec![0.0; w * d];
    for (i, row) in k.chunks_exact(d).enumerate() {
        let r = i / w;
        let c = i % w;
        for (j, &v) in row.iter().enumerate() {
            row_sums[r * d + j] += v;
            col_sums[c * d + j] += v;
        }
    }
    let dot = |g: &[f64]| -> f64 { sum_q.iter().zip(g.iter()).map(|(a, b)| a * b).sum() };
    let row_scores = row_sums.chunks_exact(d).map(dot).collect();
    let col_scores = col_sums.chunks_exact(d).map(dot).collect();
    Ok((row_scores, col_scores))
}

/// Indices of the top `n_s` scores, ranked descending; equal scores keep
/// the lower index first.
pub fn rank_top(scores: &[f64], n_s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n_s);
    idx
}

/// ArgMaxScore over rows and columns.
pub fn prune_selection(
    row_scores: &[f64],
    col_scores: &[f64],
    n_s: usize,
) -> Result<PruneSelection> {
    let (h, w) = (row_scores.len(), col_scores.len());
    if n_s == 0 || n_s > h.min(w) {
        return Err(Error::config(format!(
            "n_s {n_s} out of range 1..={} for a {h}x{w} grid",
            h.min(w)
        )));
    }
    Ok(PruneSelection {
        index_r: rank_top(row_scores, n_s),
        index_c: rank_top(col_scores, n_s),
        row_scores: row_scores.to_vec(),
        col_scores: col_scores.to_vec(),
        n_s,
    })
}

/// Gathers the pruned key/value sets K_s and V_s at the intersections of
/// the selected rows and columns.
pub fn prune_tokens(
    tape: &mut Tape,
    k: NodeId,
    v: NodeId,
    row_scores: &[f64],
    col_scores: &[f64],
    n_s: usize,
) -> Result<(NodeId, NodeId, PruneSelection)> {
    let sel = prune_selection(row_scores, col_scores, n_s)?;
    let idx = sel.token_indices(col_scores.len());
    let k_s = tape.gather_rows(k, &idx)?;
    let v_s = tape.gather_rows(v, &idx)?;
    Ok((k_s, v_s, sel))
}

/// Per-head Q/K/V projections (no bias, so row normalization makes scores
/// invariant to per-token scaling) plus biased output projection.
pub struct AttentionParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        num_heads: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let dh = channels / num_heads;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for head in 0..num_heads {
            wq.push(store.add_normal(format!("{prefix}.h{head}.wq"), &[channels, dh], rng));
            wk.push(store.add_normal(format!("{prefix}.h{head}.wk"), &[channels, dh], rng));
            wv.push(store.add_normal(format!("{prefix}.h{head}.wv"), &[channels, dh], rng));
        }
        let wo = store.add_normal(format!("{prefix}.wo"), &[channels, channels], rng);
        let bo = store.add_zeros(format!("{prefix}.bo"), &[channels]);
        AttentionParams { wq, wk, wv, wo, bo }
    }
}

/// Extra observability for tests and the ablation checks.
#[derive(Debug, Clone, Default)]
pub struct DpsaDiagnostics {
    pub selections: Vec<PruneSelection>,
    pub logit_min: f64,
    pub logit_max: f64,
    /// Softmax attention weights per head, detached.
    pub weights: Vec<Vec<f64>>,
}

pub fn dpsa_forward(
    tape: &mut Tape,
    reg: &Registered,
    grid: &TokenGrid,
    params: &AttentionParams,
    cfg: &AttentionHeadConfig,
) -> Result<NodeId> {
    dpsa_forward_impl(tape, reg, grid, params, cfg, None)
}

pub fn dpsa_forward_with_diag(
    tape: &mut Tape,
    reg: &Registered,
    grid: &TokenGrid,
    params: &AttentionParams,
    cfg: &AttentionHeadConfig,
) -> Result<(NodeId, DpsaDiagnostics)> {
    let mut diag = DpsaDiagnostics { logit_min: f64::INFINITY, logit_max: f64::NEG_INFINITY, ..Default::default() };
    let out = dpsa_forward_impl(tape, reg, grid, params, cfg, Some(&mut diag))?;
    Ok((out, diag))
}

fn dpsa_forward_impl(
    tape: &mut Tape,
    reg: &Registered,
    grid: &TokenGrid,
    params: &AttentionParams,
    cfg: &AttentionHeadConfig,
    mut diag: Option<&mut DpsaDiagnostics>,
) -> Result<NodeId> {
    let (h, w, c) = (grid.h, grid.w, grid.c);
    let n = grid.n();
    if tape.shape(grid.tokens) != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "dpsa_forward",
            lhs: tape.shape(grid.tokens).to_vec(),
            rhs: vec![n, c],
        });
    }
    if cfg.channels() != c {
        return Err(Error::config(format!(
            "attention config covers {} channels, grid has {c}",
            cfg.channels()
        )));
    }
    let n_s = match cfg.n_s_override {
        Some(v) => {
            if v == 0 || v > h.min(w) {
                return Err(Error::config(format!(
                    "n_s {v} out of range 1..={} for a {h}x{w} grid",
                    h.min(w)
                )));
            }
            v
        }
        None => default_n_s(h, w),
    };

    let dh = cfg.head_dim;
    let mut head_outputs = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let q = tape.matmul(grid.tokens, reg.node(params.wq[head]))?;
        let k = tape.matmul(grid.tokens, reg.node(params.wk[head]))?;
        let v = tape.matmul(grid.tokens, reg.node(params.wv[head]))?;
        let (qn, kn) = if cfg.l2_normalize {
            (tape.l2_normalize_rows(q)?, tape.l2_normalize_rows(k)?)
        } else {
            (q, k)
        };
        // selection is computed on values, not tape nodes: constant in backward
        let (row_scores, col_scores) = score_tokens(tape.data(qn), tape.data(kn), dh, h, w)?;
        let (k_s, v_s, sel) = prune_tokens(tape, kn, v, &row_scores, &col_scores, n_s)?;
        let k_s_t = tape.transpose(k_s)?;
        let logits = tape.matmul(qn, k_s_t)?; // temperature-free: no 1/sqrt(d)
        let attn = tape.softmax_rows(logits)?;
        if let Some(d) = diag.as_deref_mut() {
            for &v in tape.data(logits) {
                d.logit_min = d.logit_min.min(v);
                d.logit_max = d.logit_max.max(v);
            }
            d.selections.push(sel);
            d.weights.push(tape.data(attn).to_vec());
        }
        head_outputs.push(tape.matmul(attn, v_s)?);
    }
    let cat = tape.concat_cols(&head_outputs)?;
    let proj = tape.matmul(cat, reg.node(params.wo))?;
    tape.add_row_broadcast(proj, reg.node(params.bo))
}

/// Exact multiply-accumulate counts for one dense vs one pruned attention
/// pass over an H x W x C grid. Head count does not change the totals.
///
/// dense: Q.K^T plus A.V, each N*N*C.
/// pruned: Q.K_s^T plus A.V_s (N * n_s^2 * C each) plus scoring (the two
/// token sums at N*C each, then H + W score dot products of length C).
pub fn count_attention_macs(
    h: usize,
    w: usize,
    c: usize,
    _num_heads: usize,
    n_s: usize,
) -> (u64, u64) {
    let (h, w, c, n_s) = (h as u64, w as u64, c as u64, n_s as u64);
    let n = h * w;
    let dense = 2 * n * n * c;
    let attention = 2 * n * n_s * n_s * c;
    let scoring = 2 * n * c + h * c + w * c;
    (dense, attention + scoring)
}

/// The attention-term cost alone (no scoring), used for the exact-ratio
/// complexity check.
pub fn attention_term_macs(h: usize, w: usize, c: usize, n_s: usize) -> u64 {
    let n = (h * w) as u64;
    2 * n * (n_s * n_s) as u64 * c as u64
}
