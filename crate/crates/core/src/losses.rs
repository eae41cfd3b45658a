//! Training objectives: the adversarial loss, the multi-layer patchwise
//! contrastive loss with shared projection heads, and the weighted total.
//!
//! The discriminator maximizes E[log D(y)] + E[log(1 - D(G(x)))]; both
//! expectations are means over the patch logit grid and are evaluated
//! through log-sigmoid so finite logits can never produce infinities. The
//! generator defaults to the non-saturating form -E[log D(G(x))], with the
//! literal minimax direction available behind a flag.
//!
//! PatchNCE samples S co-located patches from an encoder feature map of
//! the input and of the translated output, projects both through a shared
//! two-layer MLP, L2-normalizes, and classifies each output patch against
//! the input patches with the co-located one as the positive class.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::params::{ParamId, ParamStore, Registered};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NceConfig {
    /// Softmax temperature tau.
    pub tau: f64,
    /// Patches sampled per layer (all positions when the map is smaller).
    pub num_patches: usize,
    /// Encoder sublayers feeding the loss.
    pub layer_ids: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Literal minimax generator direction instead of non-saturating.
    pub saturating_gan: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            tau: 0.07,
            num_patches: 256,
            layer_ids: vec![0, 4, 7, 10, 14],
            proj_hidden: 256,
            proj_dim: 256,
            lambda_x: 1.0,
            lambda_y: 1.0,
            saturating_gan: false,
        }
    }
}

impl NceConfig {
    /// Identity-loss preset: both contrastive terms weighted 1.
    pub fn with_identity() -> Self {
        NceConfig::default()
    }

    /// No-identity preset: lambda_x = 10, lambda_y = 0; the identity pass
    /// is skipped entirely.
    pub fn without_identity() -> Self {
        NceConfig { lambda_x: 10.0, lambda_y: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_patches < 2 {
            return Err(Error::config("num_patches must be at least 2 (one negative)"));
        }
        Ok(())
    }

    pub fn uses_identity(&self) -> bool {
        self.lambda_y != 0.0
    }
}

/// Per-step scalar losses. The generator total is
/// gan_g + lambda_x * nce_x + lambda_y * nce_y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub nce_x: f64,
    pub nce_y: f64,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.gan_g.is_finite()
            && self.gan_d.is_finite()
            && self.nce_x.is_finite()
            && self.nce_y.is_finite()
            && self.total.is_finite()
    }
}

// ── adversarial loss ─────────────────────────────────────────────────

/// Discriminator objective (to minimize):
/// -E[log D(y)] - E[log(1 - D(G(x)))], expectations over the logit grid.
pub fn gan_loss_d(tape: &mut Tape, real_logits: NodeId, fake_logits: NodeId) -> Result<NodeId> {
    let real_term = tape.log_sigmoid(real_logits);
    let real_mean = tape.mean_all(real_term);
    let neg_fake = tape.neg(fake_logits);
    let fake_term = tape.log_sigmoid(neg_fake);
    let fake_mean = tape.mean_all(fake_term);
    let s = tape.add(real_mean, fake_mean)?;
    Ok(tape.neg(s))
}

/// Generator objective. Non-saturating by default: -E[log D(G(x))].
/// With `saturating` the literal minimax direction E[log(1 - D(G(x)))]
/// is minimized instead.
pub fn gan_loss_g(tape: &mut Tape, fake_logits: NodeId, saturating: bool) -> NodeId {
    if saturating {
        let neg = tape.neg(fake_logits);
        let t = tape.log_sigmoid(neg);
        tape.mean_all(t)
    } else {
        let t = tape.log_sigmoid(fake_logits);
        let m = tape.mean_all(t);
        tape.neg(m)
    }
}

// ── PatchNCE ─────────────────────────────────────────────────────────

/// Two-layer MLP applied per patch vector, output L2-normalized. Shared
/// between the input and output sides of one encoder layer.
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ProjectionHead {
            w1: store.add_normal(format!("{prefix}.w1"), &[in_dim, hidden], rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[hidden]),
            w2: store.add_normal(format!("{prefix}.w2"), &[hidden, out_dim], rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[out_dim]),
        }
    }

    /// [S, C] patch vectors -> [S, proj_dim] unit rows.
    pub fn project(&self, tape: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, reg.node(self.w1))?;
        let h = tape.add_row_broadcast(h, reg.node(self.b1))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, reg.node(self.w2))?;
        let o = tape.add_row_broadcast(o, reg.node(self.b2))?;
        tape.l2_normalize_rows(o)
    }
}

/// One head per contrastive layer.
pub struct ProjectionHeads {
    pub heads: Vec<ProjectionHead>,
    pub layer_ids: Vec<usize>,
}

impl ProjectionHeads {
    pub fn new(
        store: &mut ParamStore,
        generator: &Generator,
        cfg: &NceConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut heads = Vec::new();
        for &id in &cfg.layer_ids {
            let in_dim = generator.sublayer_channels(id)?;
            heads.push(ProjectionHead::new(
                store,
                &format!("h.layer{id}"),
                in_dim,
                cfg.proj_hidden,
                cfg.proj_dim,
                rng,
            ));
        }
        Ok(ProjectionHeads { heads, layer_ids: cfg.layer_ids.clone() })
    }
}

/// Contrastive core on already-projected rows: logits L[s][s'] =
/// (v_out[s] . v_src[s']) / tau, cross-entropy against the diagonal,
/// mean over rows. Temperature-scaled InfoNCE with in-image negatives.
pub fn nce_core(tape: &mut Tape, v_out: NodeId, v_src: NodeId, tau: f64) -> Result<NodeId> {
    let src_t = tape.transpose(v_src)?;
    let sim = tape.matmul(v_out, src_t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    tape.cross_entropy_diag(logits)
}

/// Sampled spatial locations (sorted, without replacement) shared by the
/// source and output sides so positives stay co-located.
pub fn sample_locations(hw: usize, want: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if hw < 2 {
        return Err(Error::config(format!(
            "patch sampling needs at least 2 spatial locations, got {hw}"
        )));
    }
    let take = want.min(hw);
    let mut idx = sample(rng, hw, take).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// [C,H,W] feature map -> [S, C] matrix of patch vectors at `locations`.
fn patches_at(tape: &mut Tape, feat: NodeId, locations: &[usize]) -> Result<NodeId> {
    let tokens = tape.chw_to_tokens(feat)?;
    tape.gather_rows(tokens, locations)
}

/// PatchNCE for a single encoder layer.
pub fn patch_nce_layer(
    tape: &mut Tape,
    reg: &Registered,
    feat_src: NodeId,
    feat_out: NodeId,
    head: &ProjectionHead,
    cfg: &NceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    cfg.validate()?;
    let ss = tape.shape(feat_src).to_vec();
    let so = tape.shape(feat_out).to_vec();
    if ss != so {
        return Err(Error::ShapeMismatch { op: "patch_nce_layer", lhs: ss, rhs: so });
    }
    let hw = ss[1] * ss[2];
    let locations = sample_locations(hw, cfg.num_patches, rng)?;
    let src = patches_at(tape, feat_src, &locations)?;
    let out = patches_at(tape, feat_out, &locations)?;
    let v_src = head.project(tape, reg, src)?;
    let v_out = head.project(tape, reg, out)?;
    nce_core(tape, v_out, v_src, cfg.tau)
}

/// Sum of per-layer PatchNCE losses over the configured encoder taps.
pub fn patch_nce_total(
    tape: &mut Tape,
    reg: &Registered,
    heads: &ProjectionHeads,
    feats_src: &[NodeId],
    feats_out: &[NodeId],
    cfg: &NceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if feats_src.len() != heads.heads.len() || feats_out.len() != heads.heads.len() {
        return Err(Error::config(format!(
            "expected {} feature maps per side, got {}/{}",
            heads.heads.len(),
            feats_src.len(),
            feats_out.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (i, head) in heads.heads.iter().enumerate() {
        let l = patch_nce_layer(tape, reg, feats_src[i], feats_out[i], head, cfg, rng)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::config("patch_nce_total needs at least one layer"))
}

/// Weighted generator total on the tape:
/// gan_g + lambda_x * nce_x + lambda_y * nce_y.
pub fn total_generator_loss(
    tape: &mut Tape,
    gan_g: NodeId,
    nce_x: NodeId,
    nce_y: Option<NodeId>,
    cfg: &NceConfig,
) -> Result<NodeId> {
    let wx = tape.scale(nce_x, cfg.lambda_x);
    let mut total = tape.add(gan_g, wx)?;
    if let Some(ny) = nce_y {
        let wy = tape.scale(ny, cfg.lambda_y);
        total = tape.add(total, wy)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{randn, rng};
    use crate::tensor::Tensor;

    fn scalar_of(tape: &Tape, id: NodeId) -> f64 {
        tape.scalar_value(id)
    }

    #[test]
    fn half_probability_discriminator_loss() {
        // D(x) = 0.5 everywhere (logits 0): loss = -(log .5 + log .5) = 2 ln 2
        let mut tape = Tape::new();
        let real = tape.leaf(&Tensor::new(vec![1, 4], vec![0.0; 4]), false);
        let fake = tape.leaf(&Tensor::new(vec![1, 4], vec![0.0; 4]), false);
        let l = gan_loss_d(&mut tape, real, fake).unwrap();
        assert!((scalar_of(&tape, l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_monotone_in_logit() {
        // as the discriminator gets more confident the sample is fake
        // (logit down), the non-saturating loss grows without bound
        let mut prev = f64::NEG_INFINITY;
        for logit in [5.0, 1.0, 0.0, -1.0, -5.0, -20.0, -100.0] {
            let mut tape = Tape::new();
            let f = tape.leaf(&Tensor::scalar(logit), false);
            let l = gan_loss_g(&mut tape, f, false);
            let v = scalar_of(&tape, l);
            assert!(v.is_finite());
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn gan_losses_match_direct_evaluation() {
        // scalar oracle: evaluate the adversarial objective through explicit
        // sigmoids wherever that direct form is finite
        let mut r = rng(31);
        let real = randn(&[2, 3], 2.0, &mut r);
        let fake = randn(&[2, 3], 2.0, &mut r);
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let d_direct = -(real.data.iter().map(|&v| sigmoid(v).ln()).sum::<f64>() / 6.0
            + fake.data.iter().map(|&v| (1.0 - sigmoid(v)).ln()).sum::<f64>() / 6.0);
        let g_direct = -fake.data.iter().map(|&v| sigmoid(v).ln()).sum::<f64>() / 6.0;
        let g_sat_direct = fake.data.iter().map(|&v| (1.0 - sigmoid(v)).ln()).sum::<f64>() / 6.0;

        let mut tape = Tape::new();
        let ri = tape.leaf(&real, false);
        let fi = tape.leaf(&fake, false);
        let ld = gan_loss_d(&mut tape, ri, fi).unwrap();
        let lg = gan_loss_g(&mut tape, fi, false);
        let lg_sat = gan_loss_g(&mut tape, fi, true);
        assert!((scalar_of(&tape, ld) - d_direct).abs() < 1e-12);
        assert!((scalar_of(&tape, lg) - g_direct).abs() < 1e-12);
        assert!((scalar_of(&tape, lg_sat) - g_sat_direct).abs() < 1e-12);
    }

    #[test]
    fn nce_closed_form_orthogonal_negatives() {
        // positives at similarity 1, all 255 negatives orthogonal:
        // l = log(1 + 255 * exp(-1/tau))
        let s = 256;
        let mut data = vec![0.0; s * s];
        for i in 0..s {
            data[i * s + i] = 1.0; // orthonormal basis rows
        }
        let v = Tensor::new(vec![s, s], data);
        let mut tape = Tape::new();
        let vi = tape.leaf(&v, false);
        let l = nce_core(&mut tape, vi, vi, 0.07).unwrap();
        let want = (1.0 + 255.0 * (-1.0 / 0.07f64).exp()).ln();
        assert!((scalar_of(&tape, l) - want).abs() < 1e-12, "{} vs {want}", scalar_of(&tape, l));
    }

    #[test]
    fn nce_identity_is_optimal_for_its_negatives() {
        // distinct unit rows, output == source: perturbing any output row
        // away from its positive raises the loss
        let s = 6;
        let p = 8;
        let mut r = rng(33);
        let base = randn(&[s, p], 1.0, &mut r);
        let mut tape = Tape::new();
        let vi = tape.leaf(&base, false);
        let vn = tape.l2_normalize_rows(vi).unwrap();
        let l0 = nce_core(&mut tape, vn, vn, 0.2).unwrap();
        let opt = scalar_of(&tape, l0);

        for trial in 0..5 {
            let mut perturbed = base.clone();
            for v in &mut perturbed.data[trial * p..(trial + 1) * p] {
                *v += 0.7;
            }
            let mut t2 = Tape::new();
            let a = t2.leaf(&perturbed, false);
            let an = t2.l2_normalize_rows(a).unwrap();
            let b = t2.leaf(&base, false);
            let bn = t2.l2_normalize_rows(b).unwrap();
            let l = nce_core(&mut t2, an, bn, 0.2).unwrap();
            assert!(scalar_of(&t2, l) > opt);
        }
    }

    #[test]
    fn nce_infinite_temperature_is_uniform() {
        // tau -> inf: softmax flattens, loss -> log(N+1) for any features
        let s = 16;
        let mut r = rng(34);
        let vs = randn(&[s, 8], 1.0, &mut r);
        let vo = randn(&[s, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let a = tape.leaf(&vo, false);
        let b = tape.leaf(&vs, false);
        let an = tape.l2_normalize_rows(a).unwrap();
        let bn = tape.l2_normalize_rows(b).unwrap();
        let l = nce_core(&mut tape, an, bn, 1e6).unwrap();
        assert!((scalar_of(&tape, l) - (s as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn nce_negative_permutation_invariance() {
        // jointly permuting the sampled patch set permutes rows and columns
        // together; the mean diagonal cross-entropy is unchanged
        let s = 10;
        let mut r = rng(35);
        let vs = randn(&[s, 6], 1.0, &mut r);
        let vo = randn(&[s, 6], 1.0, &mut r);
        let perm: Vec<usize> = vec![7, 2, 9, 0, 4, 1, 8, 3, 6, 5];
        let permute = |t: &Tensor| {
            let mut d = vec![0.0; t.data.len()];
            for (new, &old) in perm.iter().enumerate() {
                d[new * 6..(new + 1) * 6].copy_from_slice(&t.data[old * 6..(old + 1) * 6]);
            }
            Tensor::new(t.shape.clone(), d)
        };
        let eval = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let ai = tape.leaf(a, false);
            let bi = tape.leaf(b, false);
            let l = nce_core(&mut tape, ai, bi, 0.07).unwrap();
            scalar_of(&tape, l)
        };
        let l1 = eval(&vo, &vs);
        let l2 = eval(&permute(&vo), &permute(&vs));
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn nce_monotone_in_positive_similarity() {
        // raise the positive similarity with negatives held fixed: the loss
        // must strictly decrease
        let s = 5;
        let p = 8;
        let mut r = rng(36);
        let vs = {
            let mut t = randn(&[s, p], 1.0, &mut r);
            // normalize rows up front
            for row in t.data.chunks_exact_mut(p) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in row {
                    *v /= n;
                }
            }
            t
        };
        let mut prev = f64::INFINITY;
        for sim in [0.0, 0.25, 0.5, 0.75, 0.95] {
            // v_out rows: sim * positive + sqrt(1-sim^2) * orthogonal direction
            let mut vo = Tensor::zeros(vec![s, p]);
            for i in 0..s {
                // build a unit vector orthogonal to vs[i] via Gram-Schmidt
                let vrow = &vs.data[i * p..(i + 1) * p];
                let mut u: Vec<f64> = (0..p).map(|j| ((i * p + j) as f64 * 0.619).sin()).collect();
                let dot: f64 = u.iter().zip(vrow).map(|(a, b)| a * b).sum();
                for (uv, &vv) in u.iter_mut().zip(vrow) {
                    *uv -= dot * vv;
                }
                let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (j, uv) in u.iter().enumerate() {
                    vo.data[i * p + j] = sim * vrow[j] + (1.0 - sim * sim).sqrt() * uv / un;
                }
            }
            let mut tape = Tape::new();
            let a = tape.leaf(&vo, false);
            let b = tape.leaf(&vs, false);
            let l = nce_core(&mut tape, a, b, 0.07).unwrap();
            let v = scalar_of(&tape, l);
            assert!(v < prev, "loss must fall as positive similarity rises");
            prev = v;
        }
    }

    #[test]
    fn patch_nce_layer_matches_slow_reference() {
        use crate::params::ParamStore;
        let (c, h, w) = (3, 4, 5);
        let cfg = NceConfig { num_patches: 8, tau: 0.07, ..Default::default() };
        let mut r = rng(37);
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "h", c, 16, 12, &mut r);
        let fs = randn(&[c, h, w], 1.0, &mut r);
        let fo = randn(&[c, h, w], 1.0, &mut r);

        let mut sample_rng = rng(99);
        let mut tape = Tape::new();
        let reg = store.register(&mut tape, false);
        let a = tape.leaf(&fs, false);
        let b = tape.leaf(&fo, false);
        let l = patch_nce_layer(&mut tape, &reg, a, b, &head, &cfg, &mut sample_rng).unwrap();
        let got = scalar_of(&tape, l);

        // slow reference: per-location loops, explicit projection and softmax
        let mut ref_rng = rng(99);
        let locations = sample_locations(h * w, cfg.num_patches, &mut ref_rng).unwrap();
        let s = locations.len();
        let project = |feat: &Tensor, loc: usize| -> Vec<f64> {
            let patch: Vec<f64> = (0..c).map(|ch| feat.data[ch * h * w + loc]).collect();
            let w1 = store.value(head.w1);
            let b1 = store.value(head.b1);
            let w2 = store.value(head.w2);
            let b2 = store.value(head.b2);
            let mut hid = vec![0.0; 16];
            for j in 0..16 {
                let mut v = b1.data[j];
                for l2 in 0..c {
                    v += patch[l2] * w1.data[l2 * 16 + j];
                }
                hid[j] = v.max(0.0);
            }
            let mut out = vec![0.0; 12];
            for j in 0..12 {
                let mut v = b2.data[j];
                for l2 in 0..16 {
                    v += hid[l2] * w2.data[l2 * 12 + j];
                }
                out[j] = v;
            }
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.iter().map(|v| v / n).collect()
        };
        let vs: Vec<Vec<f64>> = locations.iter().map(|&l| project(&fs, l)).collect();
        let vo: Vec<Vec<f64>> = locations.iter().map(|&l| project(&fo, l)).collect();
        let mut want = 0.0;
        for i in 0..s {
            let logits: Vec<f64> = (0..s)
                .map(|j| vo[i].iter().zip(vs[j].iter()).map(|(a, b)| a * b).sum::<f64>() / cfg.tau)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want += lse - logits[i];
        }
        want /= s as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_locations(100, 16, &mut rng(5)).unwrap();
        let b = sample_locations(100, 16, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let c = sample_locations(100, 16, &mut rng(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_needs_two_locations() {
        assert!(sample_locations(1, 4, &mut rng(1)).is_err());
    }

    #[test]
    fn lambda_preset_totals() {
        // (1,1) with components (0.5, 0.2, 0.3) -> 1.0
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::scalar(0.5), false);
        let nx = tape.leaf(&Tensor::scalar(0.2), false);
        let ny = tape.leaf(&Tensor::scalar(0.3), false);
        let cfg = NceConfig::with_identity();
        let total = total_generator_loss(&mut tape, g, nx, Some(ny), &cfg).unwrap();
        assert!((scalar_of(&tape, total) - 1.0).abs() < 1e-15);

        // (10,0) with components (0.5, 0.2, anything) -> 2.5, identity unused
        let cfg = NceConfig::without_identity();
        assert!(!cfg.uses_identity());
        let total = total_generator_loss(&mut tape, g, nx, None, &cfg).unwrap();
        assert!((scalar_of(&tape, total) - 2.5).abs() < 1e-15);

        // zero components -> zero total
        let z = tape.leaf(&Tensor::scalar(0.0), false);
        let total = total_generator_loss(&mut tape, z, z, Some(z), &NceConfig::with_identity()).unwrap();
        assert_eq!(scalar_of(&tape, total), 0.0);
    }
}
