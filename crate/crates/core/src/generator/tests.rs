use super::*;
use crate::gradcheck::{finite_diff_max_err, randn, rng};
use crate::params::ParamStore;

fn small_cfg(base: usize) -> GeneratorConfig {
    GeneratorConfig { base_channels: base, ..Default::default() }
}

fn build(cfg: GeneratorConfig, seed: u64) -> (Generator, ParamStore) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg, &mut store, &mut r).unwrap();
    (gen, store)
}

/// Tokens whose 13x13 field covers the pixel: |4*t - p| <= 6 per axis.
fn expected_box(p: usize, tokens: usize) -> Vec<usize> {
    (0..tokens).filter(|&t| (4 * t as isize - p as isize).abs() <= 6).collect()
}

#[test]
fn stem_impulse_covers_exactly_13x13() {
    let (gen, store) = build(small_cfg(8), 1);
    for pixel in [(16usize, 16usize), (0, 0), (31, 5)] {
        let got = gen.stem_influence(&store, 32, 32, pixel).unwrap();
        let rows = expected_box(pixel.0, 8);
        let cols = expected_box(pixel.1, 8);
        let mut want = Vec::new();
        for &r in &rows {
            for &c in &cols {
                want.push((r, c));
            }
        }
        assert_eq!(got, want, "pixel {pixel:?}");
    }
}

#[test]
fn stem_downsamples_by_four() {
    let (gen, store) = build(small_cfg(8), 2);
    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let mut r = rng(3);
    let x = tape.leaf(&randn(&[1, 80, 80], 0.5, &mut r), false);
    let y = gen.stem_forward(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.shape(y), &[32, 20, 20]); // 400 tokens on an 80x80 input
}

#[test]
fn generator_preserves_shape_and_range() {
    let (gen, store) = build(small_cfg(8), 4);
    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let mut r = rng(5);
    let x = tape.leaf(&randn(&[1, 80, 168], 0.5, &mut r), false);
    let y = gen.forward(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 80, 168]);
    for v in tape.data(y) {
        assert!(v.abs() < 1.0, "tanh output must stay in (-1,1)");
    }
}

#[test]
fn zero_decoder_gives_zero_output() {
    let (gen, mut store) = build(small_cfg(8), 6);
    for name in ["g.dec.conv1", "g.dec.conv2", "g.dec.conv3"] {
        for suffix in [".w", ".b"] {
            let id = store.find(&format!("{name}{suffix}")).unwrap();
            store.value_mut(id).data.fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let mut r = rng(7);
    let x = tape.leaf(&randn(&[1, 16, 16], 0.5, &mut r), false);
    let y = gen.forward(&mut tape, &reg, x).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_input_is_config_error() {
    let (gen, store) = build(small_cfg(8), 8);
    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let x = tape.leaf(&Tensor::zeros(vec![1, 16, 18]), false);
    let err = gen.forward(&mut tape, &reg, x).unwrap_err();
    assert!(err.to_string().contains("crop or pad"), "got: {err}");
}

#[test]
fn hpb_local_only_is_local() {
    // with the global branch off, swapping two far-apart pixels only
    // changes outputs near those pixels (instance norm statistics are
    // permutation-invariant)
    let cfg = GeneratorConfig {
        base_channels: 2,
        enable_global: false,
        ..Default::default()
    };
    let hpb_cfg = cfg.hpb_config().unwrap();
    let c = hpb_cfg.channels;
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let p = HpbParams::new(&mut store, "hpb", &hpb_cfg, &mut r);

    let x = randn(&[c, 8, 8], 1.0, &mut r);
    let mut swapped = x.clone();
    let (a, b) = ((1usize, 1usize), (6usize, 6usize));
    for ch in 0..c {
        let ia = ch * 64 + a.0 * 8 + a.1;
        let ib = ch * 64 + b.0 * 8 + b.1;
        swapped.data.swap(ia, ib);
    }
    let run = |inp: &Tensor| {
        let mut tape = Tape::new();
        let reg = store.register(&mut tape, false);
        let xi = tape.leaf(inp, false);
        let y = hpb_forward(&mut tape, &reg, xi, &p, &hpb_cfg).unwrap();
        tape.value(y)
    };
    let ya = run(&x);
    let yb = run(&swapped);
    let far = |i: usize, j: usize| {
        let d1 = (i as isize - 1).abs().max((j as isize - 1).abs());
        let d2 = (i as isize - 6).abs().max((j as isize - 6).abs());
        d1 >= 2 && d2 >= 2
    };
    let mut compared = 0;
    for ch in 0..c {
        for i in 0..8 {
            for j in 0..8 {
                if far(i, j) {
                    let idx = ch * 64 + i * 8 + j;
                    assert!(
                        (ya.data[idx] - yb.data[idx]).abs() < 1e-12,
                        "position ({i},{j}) outside both DWConv fields changed"
                    );
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn hpb_single_token_reduces_to_mlp_path() {
    let cfg = GeneratorConfig {
        base_channels: 2,
        enable_local: false,
        ..Default::default()
    };
    let hpb_cfg = cfg.hpb_config().unwrap();
    let c = hpb_cfg.channels;
    let heads = hpb_cfg.attention.num_heads;
    let dh = hpb_cfg.attention.head_dim;
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let p = HpbParams::new(&mut store, "hpb", &hpb_cfg, &mut r);
    let x = randn(&[c, 1, 1], 1.0, &mut r);

    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let xi = tape.leaf(&x, false);
    let y = hpb_forward(&mut tape, &reg, xi, &p, &hpb_cfg).unwrap();

    // by hand: attention over a single token is its value projection
    let attn = p.attn.as_ref().unwrap();
    let mut v_cat = vec![0.0; c];
    for h in 0..heads {
        let wv = store.value(attn.wv[h]);
        for j in 0..dh {
            v_cat[h * dh + j] = (0..c).map(|l| x.data[l] * wv.data[l * dh + j]).sum();
        }
    }
    let wo = store.value(attn.wo);
    let bo = store.value(attn.bo);
    let global: Vec<f64> = (0..c)
        .map(|j| bo.data[j] + (0..c).map(|l| v_cat[l] * wo.data[l * c + j]).sum::<f64>())
        .collect();
    // concat(zeros, global) through the 1x1 conv MLP, residual
    let wm = store.value(p.mlp.w);
    let bm = store.value(p.mlp.b);
    let y1: Vec<f64> = (0..c)
        .map(|o| {
            x.data[o]
                + bm.data[o]
                + (0..c).map(|l| global[l] * wm.data[o * 2 * c + c + l]).sum::<f64>()
        })
        .collect();
    // FFN: instance norm over a single position zeroes its input, so only
    // the second conv bias survives
    let b2 = store.value(p.ffn2.b);
    let want: Vec<f64> = (0..c).map(|o| y1[o] + b2.data[o]).collect();
    for (got, w) in tape.data(y).iter().zip(want.iter()) {
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }
}

#[test]
fn encoder_features_match_contract() {
    let (gen, store) = build(small_cfg(8), 11);
    let mut tape = Tape::new();
    let reg = store.register(&mut tape, false);
    let mut r = rng(12);
    let input = randn(&[1, 32, 32], 0.5, &mut r);
    let x = tape.leaf(&input, false);

    // [0] returns the input itself
    let feats = gen.encoder_features(&mut tape, &reg, x, &[0]).unwrap();
    assert_eq!(tape.data(feats[0]), input.data.as_slice());

    // the default contrastive tap set: five maps, non-increasing spatial
    let feats = gen.encoder_features(&mut tape, &reg, x, &[0, 4, 7, 10, 14]).unwrap();
    assert_eq!(feats.len(), 5);
    let mut prev = usize::MAX;
    for &f in &feats {
        let s = tape.shape(f);
        assert!(s[1] * s[2] <= prev);
        prev = s[1] * s[2];
    }

    // out-of-range tap lists the valid range
    let err = gen.encoder_features(&mut tape, &reg, x, &[16]).unwrap_err();
    assert!(err.to_string().contains("0..=15"), "got: {err}");
}

#[test]
fn taps_do_not_perturb_forward() {
    let (gen, store) = build(small_cfg(8), 13);
    let mut r = rng(14);
    let input = randn(&[1, 16, 16], 0.5, &mut r);

    let mut tape1 = Tape::new();
    let reg1 = store.register(&mut tape1, false);
    let x1 = tape1.leaf(&input, false);
    let plain = gen.forward(&mut tape1, &reg1, x1).unwrap();

    let mut tape2 = Tape::new();
    let reg2 = store.register(&mut tape2, false);
    let x2 = tape2.leaf(&input, false);
    let (tapped, feats) = gen
        .forward_with_taps(&mut tape2, &reg2, x2, &[0, 4, 7, 10, 14], false)
        .unwrap();
    assert_eq!(feats.len(), 5);
    for (a, b) in tape1.data(plain).iter().zip(tape2.data(tapped.unwrap())) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn deterministic_features() {
    let (gen, store) = build(small_cfg(8), 15);
    let mut r = rng(16);
    let input = randn(&[1, 16, 16], 0.5, &mut r);
    let run = || {
        let mut tape = Tape::new();
        let reg = store.register(&mut tape, false);
        let x = tape.leaf(&input, false);
        let feats = gen.encoder_features(&mut tape, &reg, x, &[0, 4, 7, 10, 14]).unwrap();
        feats.iter().map(|&f| tape.data(f).to_vec()).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (fa, fb) in a.iter().zip(b.iter()) {
        for (x1, x2) in fa.iter().zip(fb.iter()) {
            assert_eq!(x1.to_bits(), x2.to_bits());
        }
    }
}

#[test]
fn profile_matches_allocated_parameters() {
    let (gen, store) = build(small_cfg(16), 17);
    let profile = gen.profile(80, 184).unwrap();
    assert_eq!(profile.total_params(), store.total_elements());
}

#[test]
fn ablations_change_structure() {
    let full = build(small_cfg(8), 18);
    let no_global = build(GeneratorConfig { enable_global: false, ..small_cfg(8) }, 18);
    let no_local = build(GeneratorConfig { enable_local: false, ..small_cfg(8) }, 18);
    let no_l2 = build(GeneratorConfig { l2_normalize: false, ..small_cfg(8) }, 18);

    let pf = full.0.profile(16, 16).unwrap();
    let pg = no_global.0.profile(16, 16).unwrap();
    let pl = no_local.0.profile(16, 16).unwrap();
    let pn = no_l2.0.profile(16, 16).unwrap();

    assert_eq!(pg.macs_matching("attention"), 0);
    assert!(pf.macs_matching("attention") > 0);
    assert_eq!(pl.macs_matching("dwconv"), 0);
    assert!(pf.macs_matching("dwconv") > 0);
    assert!(pg.total_params() < pf.total_params());
    assert!(pl.total_params() < pf.total_params());
    // l2 norm has no parameters but drops MACs
    assert_eq!(pn.total_params(), pf.total_params());
    assert!(pn.total_macs() < pf.total_macs());
}

#[test]
fn both_branches_disabled_rejected() {
    let cfg = GeneratorConfig { enable_local: false, enable_global: false, ..small_cfg(8) };
    assert!(cfg.validate().is_err());
}

#[test]
fn full_generator_gradient_check() {
    let (gen, store) = build(small_cfg(8), 19);
    let mut r = rng(20);
    let input = randn(&[1, 16, 16], 0.5, &mut r);
    let probe = randn(&[1, 16, 16], 1.0, &mut r);
    let mut leaves = vec![input];
    for (_, t) in store.iter() {
        leaves.push(t.clone());
    }
    let err = finite_diff_max_err(
        &leaves,
        |tape, ids| {
            let reg = Registered::from_nodes(ids[1..].to_vec());
            let out = gen.forward(tape, &reg, ids[0])?;
            let pr = tape.leaf(&probe, false);
            let m = tape.mul(out, pr)?;
            Ok(tape.sum_all(m))
        },
        1e-5,
        2,
        &mut r,
    )
    .unwrap();
    assert!(err < 1e-3, "generator gradient rel err {err}");
}
