//! 70x70 PatchGAN discriminator: a grid of realism logits, each covering a
//! fixed receptive field of overlapping spectrogram patches.
//!
//! Layout is the standard three-downsample stack: 4x4 stride-2 convs
//! (base -> 2x -> 4x channels), a 4x4 stride-1 conv to 8x, and a final 4x4
//! stride-1 conv to one logit channel. LeakyReLU(0.2) everywhere, instance
//! norm on all but the first and last layers, zero padding 1, raw logits
//! (the loss applies log-sigmoid).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{ConvP, LayerStat, Profile};
use crate::params::{ParamStore, Registered};
use crate::tensor::{NodeId, PadMode, Tape};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { in_channels: 1, base_channels: 64, n_layers: 3 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.n_layers == 0 {
            return Err(Error::config("discriminator dimensions must be positive"));
        }
        Ok(())
    }

    /// Receptive field of one output logit, by the standard recurrence
    /// r <- r + (k-1) * prod(previous strides). The default 3-layer stack
    /// gives 70.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1usize;
        let mut jump = 1usize;
        for (k, s) in self.layer_geometry() {
            r += (k - 1) * jump;
            jump *= s;
        }
        r
    }

    /// (kernel, stride) for each conv in order.
    fn layer_geometry(&self) -> Vec<(usize, usize)> {
        let mut g = vec![(4, 2)];
        for _ in 1..self.n_layers {
            g.push((4, 2));
        }
        g.push((4, 1));
        g.push((4, 1));
        g
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<ConvP>,
}

impl Discriminator {
    pub fn new(
        cfg: DiscriminatorConfig,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let mut convs = Vec::new();
        let mut cin = cfg.in_channels;
        let mut cout = b;
        for (i, (k, s)) in cfg.layer_geometry().into_iter().enumerate() {
            let is_last = i == cfg.n_layers + 1;
            let c_next = if is_last { 1 } else { cout };
            convs.push(ConvP::new(store, &format!("d.conv{i}"), cin, c_next, k, s, 1, rng));
            cin = c_next;
            cout = (c_next * 2).min(8 * b);
        }
        Ok(Discriminator { cfg, convs })
    }

    /// Raw logit map over overlapping patches.
    pub fn forward(&self, tape: &mut Tape, reg: &Registered, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x);
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                lhs: s.to_vec(),
                rhs: vec![self.cfg.in_channels],
            });
        }
        let last = self.convs.len() - 1;
        let mut cur = x;
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.apply(tape, reg, cur, PadMode::Zero)?;
            if i != last {
                if i != 0 {
                    cur = tape.instance_norm(cur, 1e-5)?;
                }
                cur = tape.leaky_relu(cur, 0.2);
            }
        }
        Ok(cur)
    }

    /// Spatial size of the logit map for an H x W input.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let mut oh = h;
        let mut ow = w;
        for (k, s) in self.cfg.layer_geometry() {
            oh = (oh + 2 - k) / s + 1;
            ow = (ow + 2 - k) / s + 1;
        }
        (oh, ow)
    }

    pub fn profile(&self, h: usize, w: usize) -> Profile {
        let mut layers = Vec::new();
        let mut oh = h;
        let mut ow = w;
        for (i, conv) in self.convs.iter().enumerate() {
            oh = (oh + 2 - conv.k) / conv.stride + 1;
            ow = (ow + 2 - conv.k) / conv.stride + 1;
            layers.push(LayerStat {
                name: format!("d.conv{i}"),
                params: conv.param_count(),
                macs: conv.macs(oh, ow),
            });
        }
        Profile { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_max_err, randn, rng};
    use crate::params::Registered;

    fn build(base: usize, seed: u64) -> (Discriminator, ParamStore) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let d = Discriminator::new(
            DiscriminatorConfig { base_channels: base, ..Default::default() },
            &mut store,
            &mut r,
        )
        .unwrap();
        (d, store)
    }

    #[test]
    fn default_stack_matches_patchgan_shape() {
        let (d, store) = build(64, 1);
        // 64 -> 128 -> 256 -> 512 -> 1 channels
        let mut tape = Tape::new();
        let reg = store.register(&mut tape, false);
        let mut r = rng(2);
        let x = tape.leaf(&randn(&[1, 80, 168], 0.5, &mut r), false);
        let y = d.forward(&mut tape, &reg, x).unwrap();
        let (oh, ow) = d.output_shape(80, 168);
        assert_eq!(tape.shape(y), &[1, oh, ow]);
        // shape oracle: three halvings then two k=4 s=1 p=1 layers (-1 each)
        let conv = |n: usize, k: usize, s: usize| (n + 2 - k) / s + 1;
        let mut h = 80;
        let mut w = 168;
        for _ in 0..3 {
            h = conv(h, 4, 2);
            w = conv(w, 4, 2);
        }
        for _ in 0..2 {
            h = conv(h, 4, 1);
            w = conv(w, 4, 1);
        }
        assert_eq!((oh, ow), (h, w));
    }

    #[test]
    fn receptive_field_is_70() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.receptive_field(), 70);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let (d, mut store) = build(8, 3);
        for i in 0..store.len() {
            store.value_mut(crate::params::ParamId(i)).data.fill(0.0);
        }
        let mut tape = Tape::new();
        let reg = store.register(&mut tape, false);
        let mut r = rng(4);
        let x = tape.leaf(&randn(&[1, 80, 80], 0.5, &mut r), false);
        let y = d.forward(&mut tape, &reg, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_covariance_in_the_interior() {
        // shifting the input by one output stride (8 px) shifts the interior
        // of the logit map by one cell
        let (d, store) = build(8, 5);
        let mut r = rng(6);
        let x = randn(&[1, 128, 128], 0.7, &mut r);
        let mut shifted = Tensor::zeros(vec![1, 128, 128]);
        for i in 0..128 {
            for j in 8..128 {
                shifted.data[i * 128 + j] = x.data[i * 128 + j - 8];
            }
        }
        let run = |inp: &Tensor| {
            let mut tape = Tape::new();
            let reg = store.register(&mut tape, false);
            let xi = tape.leaf(inp, false);
            let y = d.forward(&mut tape, &reg, xi).unwrap();
            (tape.shape(y).to_vec(), tape.value(y))
        };
        let (shape, base) = run(&x);
        let (_, moved) = run(&shifted);
        let (oh, ow) = (shape[1], shape[2]);
        let mut checked = 0;
        for i in 3..oh - 3 {
            for j in 4..ow - 3 {
                let a = base.data[i * ow + j - 1];
                let b = moved.data[i * ow + j];
                assert!((a - b).abs() < 1e-12, "logit ({i},{j}) not shifted: {a} vs {b}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    use crate::tensor::Tensor;

    #[test]
    fn gradient_check_reduced_width() {
        let (d, store) = build(4, 7);
        let mut r = rng(8);
        let input = randn(&[1, 24, 24], 0.5, &mut r);
        let mut leaves = vec![input];
        for (_, t) in store.iter() {
            leaves.push(t.clone());
        }
        let err = finite_diff_max_err(
            &leaves,
            |tape, ids| {
                let reg = Registered::from_nodes(ids[1..].to_vec());
                let out = d.forward(tape, &reg, ids[0])?;
                Ok(tape.mean_all(out))
            },
            1e-5,
            4,
            &mut r,
        )
        .unwrap();
        assert!(err < 1e-3, "discriminator gradient rel err {err}");
    }

    #[test]
    fn profile_matches_allocated_parameters() {
        let (d, store) = build(16, 9);
        let p = d.profile(80, 184);
        assert_eq!(p.total_params(), store.total_elements());
    }
}
