//! The mel-to-mel generator: a three-conv stem producing overlapping patch
//! embeddings with a 13x13 receptive field, nine Hybrid Perception Blocks
//! in the bottleneck, and a three-conv decoder with a Tanh output.
//!
//! Each Hybrid Perception Block mixes a local depthwise-convolution branch
//! with a global DPSA branch, fuses them through a 1x1 convolutional MLP
//! (first residual stage), and refines with a convolutional feedforward
//! network containing instance norm and GELU (second residual stage).

use serde::{Deserialize, Serialize};

use crate::dpsa::{dpsa_forward, AttentionHeadConfig, AttentionParams, TokenGrid};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Registered};
use crate::tensor::{NodeId, PadMode, Tape, Tensor};

pub const STEM_RECEPTIVE_FIELD: usize = 13;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_hpb: usize,
    pub num_heads: usize,
    pub dwconv_kernel: usize,
    pub ffn_expansion: usize,
    pub padding: PadMode,
    pub output_tanh: bool,
    /// HPB local (depthwise conv) branch; `false` is the no-local ablation.
    pub enable_local: bool,
    /// HPB global (DPSA) branch; `false` is the no-attention ablation.
    pub enable_global: bool,
    /// Q/K row normalization; `false` is the no-l2-norm ablation.
    pub l2_normalize: bool,
    pub n_s_override: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 1,
            base_channels: 64,
            n_hpb: 9,
            num_heads: 4,
            dwconv_kernel: 3,
            ffn_expansion: 2,
            padding: PadMode::Reflect,
            output_tanh: true,
            enable_local: true,
            enable_global: true,
            l2_normalize: true,
            n_s_override: None,
        }
    }
}

impl GeneratorConfig {
    /// Bottleneck width after the stride-4 stem.
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn hpb_config(&self) -> Result<HpbConfig> {
        HpbConfig::new(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.dwconv_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "depthwise kernel must be odd, got {}",
                self.dwconv_kernel
            )));
        }
        if !(self.enable_local || self.enable_global) {
            return Err(Error::config(
                "at least one HPB branch (local, global) must be enabled",
            ));
        }
        AttentionHeadConfig::new(self.bottleneck_channels(), self.num_heads)?;
        Ok(())
    }

    /// Number of enumerable encoder sublayers (input + stem + HPBs).
    pub fn encoder_sublayers(&self) -> usize {
        7 + self.n_hpb
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HpbConfig {
    pub channels: usize,
    pub dwconv_kernel: usize,
    pub enable_local: bool,
    pub enable_global: bool,
    pub ffn_expansion: usize,
    pub padding: PadMode,
    pub attention: AttentionHeadConfig,
}

impl HpbConfig {
    pub fn new(g: &GeneratorConfig) -> Result<Self> {
        g.validate()?;
        let mut attention = AttentionHeadConfig::new(g.bottleneck_channels(), g.num_heads)?;
        attention.l2_normalize = g.l2_normalize;
        attention.n_s_override = g.n_s_override;
        Ok(HpbConfig {
            channels: g.bottleneck_channels(),
            dwconv_kernel: g.dwconv_kernel,
            enable_local: g.enable_local,
            enable_global: g.enable_global,
            ffn_expansion: g.ffn_expansion,
            padding: g.padding,
            attention,
        })
    }
}

/// One convolution layer: weights, bias, and geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvP {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[cout, cin, k, k], rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        ConvP { w, b, cin, cout, k, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, reg: &Registered, x: NodeId, mode: PadMode) -> Result<NodeId> {
        tape.conv2d_padded(x, reg.node(self.w), reg.node(self.b), self.stride, self.pad, mode)
    }

    pub fn param_count(&self) -> u64 {
        (self.cout * self.cin * self.k * self.k + self.cout) as u64
    }

    pub fn macs(&self, oh: usize, ow: usize) -> u64 {
        (self.cout * oh * ow * self.cin * self.k * self.k) as u64
    }
}

pub struct HpbParams {
    pub dw: Option<(ParamId, ParamId)>,
    pub attn: Option<AttentionParams>,
    pub mlp: ConvP,
    pub ffn1: ConvP,
    pub ffn2: ConvP,
}

impl HpbParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &HpbConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let c = cfg.channels;
        let k = cfg.dwconv_kernel;
        let dw = cfg.enable_local.then(|| {
            let w = store.add_normal(format!("{prefix}.dw.w"), &[c, k, k], rng);
            let b = store.add_zeros(format!("{prefix}.dw.b"), &[c]);
            (w, b)
        });
        let attn = cfg
            .enable_global
            .then(|| AttentionParams::new(store, &format!("{prefix}.attn"), c, cfg.attention.num_heads, rng));
        let e = cfg.ffn_expansion;
        HpbParams {
            dw,
            attn,
            mlp: ConvP::new(store, &format!("{prefix}.mlp"), 2 * c, c, 1, 1, 0, rng),
            ffn1: ConvP::new(store, &format!("{prefix}.ffn1"), c, e * c, 1, 1, 0, rng),
            ffn2: ConvP::new(store, &format!("{prefix}.ffn2"), e * c, c, 1, 1, 0, rng),
        }
    }
}

/// Local DWConv branch + global DPSA branch, concatenated, fused by a 1x1
/// conv MLP (first residual), then a conv feedforward with IN + GELU
/// (second residual). A disabled branch contributes zeros of matching
/// shape so the concat width never changes.
pub fn hpb_forward(
    tape: &mut Tape,
    reg: &Registered,
    x: NodeId,
    p: &HpbParams,
    cfg: &HpbConfig,
) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != cfg.channels {
        return Err(Error::ShapeMismatch { op: "hpb_forward", lhs: s, rhs: vec![cfg.channels] });
    }
    let (c, h, w) = (s[0], s[1], s[2]);

    let local = match &p.dw {
        Some((dw_w, dw_b)) => tape.depthwise_padded(
            x,
            reg.node(*dw_w),
            reg.node(*dw_b),
            1,
            cfg.dwconv_kernel / 2,
            cfg.padding,
        )?,
        None => tape.constant(&Tensor::zeros(vec![c, h, w])),
    };
    let global = match &p.attn {
        Some(attn) => {
            let tokens = tape.chw_to_tokens(x)?;
            let grid = TokenGrid { h, w, c, tokens };
            let out = dpsa_forward(tape, reg, &grid, attn, &cfg.attention)?;
            tape.tokens_to_chw(out, c, h, w)?
        }
        None => tape.constant(&Tensor::zeros(vec![c, h, w])),
    };

    let cat = tape.concat_channels(&[local, global])?;
    let fused = p.mlp.apply(tape, reg, cat, cfg.padding)?;
    let stage1 = tape.add(x, fused)?;

    let ff = p.ffn1.apply(tape, reg, stage1, cfg.padding)?;
    let ff = tape.instance_norm(ff, 1e-5)?;
    let ff = tape.gelu(ff);
    let ff = p.ffn2.apply(tape, reg, ff, cfg.padding)?;
    tape.add(stage1, ff)
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    stem: [ConvP; 3],
    hpbs: Vec<HpbParams>,
    dec1: ConvP,
    dec2: ConvP,
    dec3: ConvP,
}

impl Generator {
    pub fn new(
        cfg: GeneratorConfig,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let stem = [
            ConvP::new(store, "g.stem.conv1", cfg.in_channels, b, 7, 1, 3, rng),
            ConvP::new(store, "g.stem.conv2", b, 2 * b, 3, 2, 1, rng),
            ConvP::new(store, "g.stem.conv3", 2 * b, 4 * b, 3, 2, 1, rng),
        ];
        let hpb_cfg = cfg.hpb_config()?;
        let hpbs = (0..cfg.n_hpb)
            .map(|i| HpbParams::new(store, &format!("g.hpb{i}"), &hpb_cfg, rng))
            .collect();
        let dec1 = ConvP::new(store, "g.dec.conv1", 4 * b, 2 * b, 3, 1, 1, rng);
        let dec2 = ConvP::new(store, "g.dec.conv2", 2 * b, b, 3, 1, 1, rng);
        let dec3 = ConvP::new(store, "g.dec.conv3", b, cfg.in_channels, 7, 1, 3, rng);
        Ok(Generator { cfg, stem, hpbs, dec1, dec2, dec3 })
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<(usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                lhs: s.to_vec(),
                rhs: vec![self.cfg.in_channels],
            });
        }
        let (h, w) = (s[1], s[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "generator input {h}x{w} must have spatial dims divisible by 4; crop or pad the input"
            )));
        }
        Ok((h, w))
    }

    /// Stem only: overlapping patch embeddings at stride 4. Every output
    /// token sees exactly a 13x13 pixel field (7x7 stride 1, then two 3x3
    /// stride 2: r = 7 -> 7+2*1 = 9 -> 9+2*2 = 13).
    pub fn stem_forward(&self, tape: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let mut cur = x;
        for conv in &self.stem {
            cur = conv.apply(tape, reg, cur, self.cfg.padding)?;
            cur = tape.instance_norm(cur, 1e-5)?;
            cur = tape.gelu(cur);
        }
        Ok(cur)
    }

    /// Stem with normalization skipped: used by the impulse-response probe.
    /// Instance norm couples every spatial position through the channel
    /// statistics, while the receptive field is a property of the conv
    /// stack alone.
    fn stem_conv_only(&self, tape: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for conv in &self.stem {
            cur = conv.apply(tape, reg, cur, self.cfg.padding)?;
            cur = tape.gelu(cur);
        }
        Ok(cur)
    }

    /// Bottleneck tokens influenced by a single input pixel, measured
    /// against the zero-input baseline on the conv pathway.
    pub fn stem_influence(
        &self,
        store: &ParamStore,
        h: usize,
        w: usize,
        pixel: (usize, usize),
    ) -> Result<Vec<(usize, usize)>> {
        let run = |input: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let reg = store.register(&mut tape, false);
            let x = tape.leaf(input, false);
            let out = self.stem_conv_only(&mut tape, &reg, x)?;
            Ok(tape.value(out))
        };
        let zeros = Tensor::zeros(vec![self.cfg.in_channels, h, w]);
        let mut impulse = zeros.clone();
        impulse.data[pixel.0 * w + pixel.1] = 1.0;
        let base = run(&zeros)?;
        let hit = run(&impulse)?;
        let (th, tw) = (h / 4, w / 4);
        let c = self.cfg.bottleneck_channels();
        let mut out = Vec::new();
        for ty in 0..th {
            for tx in 0..tw {
                let touched = (0..c).any(|ch| {
                    let idx = ch * th * tw + ty * tw + tx;
                    (base.data[idx] - hit.data[idx]).abs() > 1e-12
                });
                if touched {
                    out.push((ty, tx));
                }
            }
        }
        Ok(out)
    }

    /// Full forward pass, optionally collecting encoder sublayer taps.
    ///
    /// The flat sublayer list is: 0 = input, 1/3/5 = stem convs,
    /// 2/4/6 = stem norm+act outputs, 7.. = HPB outputs. With
    /// `encoder_only` the pass stops at the deepest requested tap and the
    /// decoder never runs.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        reg: &Registered,
        x: NodeId,
        layer_ids: &[usize],
        encoder_only: bool,
    ) -> Result<(Option<NodeId>, Vec<NodeId>)> {
        let max_layer = 6 + self.cfg.n_hpb;
        for &id in layer_ids {
            if id > max_layer {
                return Err(Error::config(format!(
                    "encoder sublayer {id} out of range; valid indices are 0..={max_layer}"
                )));
            }
        }
        self.check_input(tape, x)?;
        let hpb_cfg = self.cfg.hpb_config()?;
        let deepest = layer_ids.iter().copied().max().unwrap_or(0);
        let mut taps: Vec<Option<NodeId>> = vec![None; max_layer + 1];
        taps[0] = Some(x);

        let mut cur = x;
        let mut idx = 0usize;
        'stem: for conv in &self.stem {
            if encoder_only && idx >= deepest {
                break 'stem;
            }
            cur = conv.apply(tape, reg, cur, self.cfg.padding)?;
            idx += 1;
            taps[idx] = Some(cur);
            if encoder_only && idx >= deepest {
                break 'stem;
            }
            cur = tape.instance_norm(cur, 1e-5)?;
            cur = tape.gelu(cur);
            idx += 1;
            taps[idx] = Some(cur);
        }
        for p in &self.hpbs {
            if encoder_only && idx >= deepest {
                break;
            }
            cur = hpb_forward(tape, reg, cur, p, &hpb_cfg)?;
            idx += 1;
            taps[idx] = Some(cur);
        }

        let feats: Vec<NodeId> = layer_ids
            .iter()
            .map(|&id| taps[id].expect("tap recorded for every id up to the deepest"))
            .collect();
        if encoder_only {
            return Ok((None, feats));
        }

        // decoder: two nearest-neighbor upsample + conv stages, final 7x7
        cur = tape.upsample_nearest(cur, 2)?;
        cur = self.dec1.apply(tape, reg, cur, self.cfg.padding)?;
        cur = tape.instance_norm(cur, 1e-5)?;
        cur = tape.gelu(cur);
        cur = tape.upsample_nearest(cur, 2)?;
        cur = self.dec2.apply(tape, reg, cur, self.cfg.padding)?;
        cur = tape.instance_norm(cur, 1e-5)?;
        cur = tape.gelu(cur);
        cur = self.dec3.apply(tape, reg, cur, self.cfg.padding)?;
        if self.cfg.output_tanh {
            cur = tape.tanh(cur);
        }
        Ok((Some(cur), feats))
    }

    pub fn forward(&self, tape: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        let (out, _) = self.forward_with_taps(tape, reg, x, &[], false)?;
        Ok(out.expect("full pass returns an output"))
    }

    /// Encoder activations at the requested sublayers from a single pass.
    pub fn encoder_features(
        &self,
        tape: &mut Tape,
        reg: &Registered,
        x: NodeId,
        layer_ids: &[usize],
    ) -> Result<Vec<NodeId>> {
        let (_, feats) = self.forward_with_taps(tape, reg, x, layer_ids, true)?;
        Ok(feats)
    }

    /// Channel count at each encoder sublayer (for sizing projection heads).
    pub fn sublayer_channels(&self, layer_id: usize) -> Result<usize> {
        let b = self.cfg.base_channels;
        let max_layer = 6 + self.cfg.n_hpb;
        match layer_id {
            0 => Ok(self.cfg.in_channels),
            1 | 2 => Ok(b),
            3 | 4 => Ok(2 * b),
            5 | 6 => Ok(4 * b),
            x if x <= max_layer => Ok(4 * b),
            x => Err(Error::config(format!(
                "encoder sublayer {x} out of range; valid indices are 0..={max_layer}"
            ))),
        }
    }

    /// Exact per-layer parameter and MAC accounting for an H x W input.
    pub fn profile(&self, h: usize, w: usize) -> Result<Profile> {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "profile input {h}x{w} must have spatial dims divisible by 4; crop or pad the input"
            )));
        }
        let mut layers = Vec::new();
        let c = self.cfg.bottleneck_channels();
        layers.push(LayerStat {
            name: "stem.conv1".into(),
            params: self.stem[0].param_count(),
            macs: self.stem[0].macs(h, w),
        });
        layers.push(LayerStat {
            name: "stem.conv2".into(),
            params: self.stem[1].param_count(),
            macs: self.stem[1].macs(h / 2, w / 2),
        });
        layers.push(LayerStat {
            name: "stem.conv3".into(),
            params: self.stem[2].param_count(),
            macs: self.stem[2].macs(h / 4, w / 4),
        });
        let (th, tw) = (h / 4, w / 4);
        let n = th * tw;
        let hpb_cfg = self.cfg.hpb_config()?;
        let n_s = hpb_cfg
            .attention
            .n_s_override
            .unwrap_or_else(|| crate::dpsa::default_n_s(th, tw));
        for (i, p) in self.hpbs.iter().enumerate() {
            let mut dw_params = 0u64;
            let mut dw_macs = 0u64;
            if p.dw.is_some() {
                let k = hpb_cfg.dwconv_kernel;
                dw_params = (c * k * k + c) as u64;
                dw_macs = (c * n * k * k) as u64;
            }
            let mut attn_params = 0u64;
            let mut attn_macs = 0u64;
            if p.attn.is_some() {
                attn_params = (4 * c * c + c) as u64;
                let proj = 4 * (n as u64) * (c as u64) * (c as u64);
                let (_, pruned) =
                    crate::dpsa::count_attention_macs(th, tw, c, hpb_cfg.attention.num_heads, n_s);
                let l2 = if hpb_cfg.attention.l2_normalize { 2 * (n * c) as u64 } else { 0 };
                attn_macs = proj + pruned + l2;
            }
            layers.push(LayerStat {
                name: format!("hpb{i}.dwconv"),
                params: dw_params,
                macs: dw_macs,
            });
            layers.push(LayerStat {
                name: format!("hpb{i}.attention"),
                params: attn_params,
                macs: attn_macs,
            });
            layers.push(LayerStat {
                name: format!("hpb{i}.mlp+ffn"),
                params: p.mlp.param_count() + p.ffn1.param_count() + p.ffn2.param_count(),
                macs: p.mlp.macs(th, tw) + p.ffn1.macs(th, tw) + p.ffn2.macs(th, tw),
            });
        }
        layers.push(LayerStat {
            name: "dec.conv1".into(),
            params: self.dec1.param_count(),
            macs: self.dec1.macs(h / 2, w / 2),
        });
        layers.push(LayerStat {
            name: "dec.conv2".into(),
            params: self.dec2.param_count(),
            macs: self.dec2.macs(h, w),
        });
        layers.push(LayerStat {
            name: "dec.conv3".into(),
            params: self.dec3.param_count(),
            macs: self.dec3.macs(h, w),
        });
        Ok(Profile { layers })
    }
}

#[derive(Debug, Clone)]
pub struct LayerStat {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct Profile {
    pub layers: Vec<LayerStat>,
}

impl Profile {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// Sum of MACs over layers whose name contains `needle`.
    pub fn macs_matching(&self, needle: &str) -> u64 {
        self.layers.iter().filter(|l| l.name.contains(needle)).map(|l| l.macs).sum()
    }
}

#[cfg(test)]
mod tests;
