//! Adversarial training: alternating discriminator/generator Adam updates,
//! the constant-then-linear learning-rate schedule, synthetic desk-scale
//! domains, and bit-exact checkpointing.
//!
//! Step layout: (1) the discriminator updates on a fresh, gradient-detached
//! translation; (2) the generator and projection heads update jointly on
//! the adversarial term against the just-updated discriminator plus the
//! weighted PatchNCE terms. Everything draws from one counter-based RNG,
//! so a fixed seed gives a bit-identical loss trace, and a save/resume
//! cycle reproduces the uninterrupted run exactly.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, Dtype};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    gan_loss_d, gan_loss_g, patch_nce_total, total_generator_loss, LossReport, NceConfig,
    ProjectionHeads,
};
use crate::optim::{clip_grad_norm, lr_schedule, Adam, AdamConfig, StepOutcome};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs_total: u64,
    pub epochs_constant: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Toy-run length in steps.
    pub steps: u64,
    pub samples_per_domain: usize,
    pub bands: usize,
    pub frames: usize,
    /// Ablation switches (mapped onto the generator config at setup).
    pub no_dpsa: bool,
    pub no_local: bool,
    pub no_l2norm: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub nce: NceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // desk-scale defaults: small channels, 2-second mel segments
        TrainConfig {
            lr0: 2e-4,
            epochs_total: 63,
            epochs_constant: 54,
            batch_size: 1,
            adam: AdamConfig::default(),
            grad_clip: None,
            seed: 7,
            steps: 500,
            samples_per_domain: 8,
            bands: 80,
            frames: 184,
            no_dpsa: false,
            no_local: false,
            no_l2norm: false,
            generator: GeneratorConfig { base_channels: 16, ..Default::default() },
            discriminator: DiscriminatorConfig { base_channels: 16, ..Default::default() },
            nce: NceConfig::without_identity(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epochs_constant > 0 && self.epochs_constant <= self.epochs_total) {
            return Err(Error::config(format!(
                "need 0 < epochs_constant <= epochs_total, got {}/{}",
                self.epochs_constant, self.epochs_total
            )));
        }
        if self.samples_per_domain == 0 || self.bands == 0 || self.frames % 4 != 0 {
            return Err(Error::config(
                "need samples_per_domain > 0 and frames divisible by 4",
            ));
        }
        self.effective_generator().validate()?;
        self.discriminator.validate()?;
        self.nce.validate()?;
        Ok(())
    }

    /// Generator config with the ablation flags applied.
    pub fn effective_generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            enable_global: self.generator.enable_global && !self.no_dpsa,
            enable_local: self.generator.enable_local && !self.no_local,
            l2_normalize: self.generator.l2_normalize && !self.no_l2norm,
            ..self.generator
        }
    }

    fn steps_per_epoch(&self) -> u64 {
        self.samples_per_domain as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounters {
    /// Full G passes translating a source sample.
    pub translate: u64,
    /// Full G passes on a target sample (identity term).
    pub identity: u64,
    /// Encoder-only passes re-embedding a generated output.
    pub reencode: u64,
    pub discriminator: u64,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub heads: ProjectionHeads,
    pub discriminator: Discriminator,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub counters: ForwardCounters,
    pub consecutive_skips: u32,
    pub nan_events: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut g_store = ParamStore::new();
        let generator = Generator::new(cfg.effective_generator(), &mut g_store, &mut rng)?;
        let heads = ProjectionHeads::new(&mut g_store, &generator, &cfg.nce, &mut rng)?;
        let mut d_store = ParamStore::new();
        let discriminator = Discriminator::new(cfg.discriminator, &mut d_store, &mut rng)?;
        let adam_g = Adam::new(&g_store, cfg.adam);
        let adam_d = Adam::new(&d_store, cfg.adam);
        Ok(TrainState {
            cfg,
            generator,
            heads,
            discriminator,
            g_store,
            d_store,
            adam_g,
            adam_d,
            rng,
            step: 0,
            counters: ForwardCounters::default(),
            consecutive_skips: 0,
            nan_events: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        let epoch = self.step / self.cfg.steps_per_epoch();
        lr_schedule(epoch, self.cfg.lr0, self.cfg.epochs_constant, self.cfg.epochs_total)
    }

    /// One alternating D/G update on a normalized (x, y) mel pair.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<LossReport> {
        let lr = self.current_lr();
        let layer_ids = self.cfg.nce.layer_ids.clone();

        // generator tape: translate x, keeping encoder taps for PatchNCE
        let mut g_tape = Tape::new();
        let g_reg = self.g_store.register(&mut g_tape, true);
        let xi = g_tape.leaf(x, false);
        let (fake_opt, feats_x) =
            self.generator.forward_with_taps(&mut g_tape, &g_reg, xi, &layer_ids, false)?;
        let fake = fake_opt.expect("full pass");
        self.counters.translate += 1;
        let fake_value = g_tape.value(fake);

        // discriminator phase on its own tape; the fake enters detached
        let mut d_tape = Tape::new();
        let d_reg = self.d_store.register(&mut d_tape, true);
        let real_in = d_tape.leaf(y, false);
        let fake_in = d_tape.leaf(&fake_value, false);
        let d_real = self.discriminator.forward(&mut d_tape, &d_reg, real_in)?;
        let d_fake = self.discriminator.forward(&mut d_tape, &d_reg, fake_in)?;
        self.counters.discriminator += 2;
        let loss_d = gan_loss_d(&mut d_tape, d_real, d_fake)?;
        let gan_d = d_tape.scalar_value(loss_d);
        let mut d_applied = false;
        if gan_d.is_finite() {
            d_tape.backward(loss_d)?;
            let mut d_grads = self.d_store.collect_grads(&d_tape, &d_reg);
            drop(d_tape);
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(&mut d_grads, max);
            }
            match self.adam_d.step(&mut self.d_store, &d_grads, lr) {
                StepOutcome::Applied => d_applied = true,
                StepOutcome::SkippedNonFinite => self.nan_events += 1,
            }
        }

        // generator phase against the updated discriminator (constants here)
        let d_const = self.d_store.register(&mut g_tape, false);
        let d_on_fake = self.discriminator.forward(&mut g_tape, &d_const, fake)?;
        self.counters.discriminator += 1;
        let gan_g_node = gan_loss_g(&mut g_tape, d_on_fake, self.cfg.nce.saturating_gan);

        let feats_fake =
            self.generator.encoder_features(&mut g_tape, &g_reg, fake, &layer_ids)?;
        self.counters.reencode += 1;
        let nce_x_node = patch_nce_total(
            &mut g_tape,
            &g_reg,
            &self.heads,
            &feats_x,
            &feats_fake,
            &self.cfg.nce,
            &mut self.rng,
        )?;

        let nce_y_node = if self.cfg.nce.uses_identity() {
            let yi = g_tape.leaf(y, false);
            let (idt_opt, feats_y) =
                self.generator.forward_with_taps(&mut g_tape, &g_reg, yi, &layer_ids, false)?;
            self.counters.identity += 1;
            let idt = idt_opt.expect("full pass");
            let feats_idt =
                self.generator.encoder_features(&mut g_tape, &g_reg, idt, &layer_ids)?;
            self.counters.reencode += 1;
            Some(patch_nce_total(
                &mut g_tape,
                &g_reg,
                &self.heads,
                &feats_y,
                &feats_idt,
                &self.cfg.nce,
                &mut self.rng,
            )?)
        } else {
            None
        };

        let total_node =
            total_generator_loss(&mut g_tape, gan_g_node, nce_x_node, nce_y_node, &self.cfg.nce)?;
        let report = LossReport {
            gan_g: g_tape.scalar_value(gan_g_node),
            gan_d,
            nce_x: g_tape.scalar_value(nce_x_node),
            nce_y: nce_y_node.map_or(0.0, |n| g_tape.scalar_value(n)),
            total: g_tape.scalar_value(total_node),
        };

        let mut g_applied = false;
        if report.all_finite() {
            g_tape.backward(total_node)?;
            let mut g_grads = self.g_store.collect_grads(&g_tape, &g_reg);
            drop(g_tape);
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(&mut g_grads, max);
            }
            match self.adam_g.step(&mut self.g_store, &g_grads, lr) {
                StepOutcome::Applied => g_applied = true,
                StepOutcome::SkippedNonFinite => self.nan_events += 1,
            }
        }

        if d_applied && g_applied {
            self.consecutive_skips = 0;
        } else {
            self.consecutive_skips += 1;
            if self.consecutive_skips >= 10 {
                return Err(Error::config(
                    "aborting: 10 consecutive training steps skipped on non-finite losses",
                ));
            }
        }
        self.step += 1;
        Ok(report)
    }

    // ── checkpointing ────────────────────────────────────────────────

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let (gm, gv) = self.adam_g.moments();
        let (dm, dv) = self.adam_d.moments();
        let meta = json!({
            "kind": "training",
            "step": self.step,
            "counters": self.counters,
            "consecutive_skips": self.consecutive_skips,
            "nan_events": self.nan_events,
            "adam_t_g": self.adam_g.step_count(),
            "adam_t_d": self.adam_d.step_count(),
            "rng": {
                "seed": hex_encode(&self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "config": self.cfg,
        });
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.g_store.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (name, t) in self.d_store.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        let moment = |prefix: &str, store: &ParamStore, m: &[Vec<f64>], v: &[Vec<f64>]| {
            let mut out = Vec::new();
            for (i, (name, t)) in store.iter().enumerate() {
                out.push((format!("{prefix}.m.{name}"), Tensor::new(t.shape.clone(), m[i].clone())));
                out.push((format!("{prefix}.v.{name}"), Tensor::new(t.shape.clone(), v[i].clone())));
            }
            out
        };
        tensors.extend(moment("opt_g", &self.g_store, gm, gv));
        tensors.extend(moment("opt_d", &self.d_store, dm, dv));
        checkpoint::save(
            path,
            meta,
            tensors.iter().map(|(n, t)| (n.as_str(), t)),
            Dtype::F64,
        )
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<TrainState> {
        let file = checkpoint::load(path)?;
        let kind = file.meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        if kind != "training" {
            return Err(Error::Incompatible(format!(
                "expected a training checkpoint, found kind '{kind}'"
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(
            file.meta.get("config").cloned().ok_or_else(|| {
                Error::Incompatible("training checkpoint missing config block".into())
            })?,
        )
        .map_err(|e| Error::Incompatible(format!("config block: {e}")))?;
        let mut state = TrainState::new(cfg)?;

        let restore_store = |store: &mut ParamStore| -> Result<()> {
            for i in 0..store.len() {
                let id = crate::params::ParamId(i);
                let name = store.name(id).to_string();
                let t = file
                    .tensor(&name)
                    .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
                if t.shape != store.value(id).shape {
                    return Err(Error::Incompatible(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape,
                        store.value(id).shape
                    )));
                }
                store.value_mut(id).data = t.data.clone();
            }
            Ok(())
        };
        restore_store(&mut state.g_store)?;
        restore_store(&mut state.d_store)?;

        let restore_moments = |prefix: &str, store: &ParamStore| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, _) in store.iter() {
                let mt = file
                    .tensor(&format!("{prefix}.m.{name}"))
                    .ok_or_else(|| Error::Incompatible(format!("missing moment {prefix}.m.{name}")))?;
                let vt = file
                    .tensor(&format!("{prefix}.v.{name}"))
                    .ok_or_else(|| Error::Incompatible(format!("missing moment {prefix}.v.{name}")))?;
                m.push(mt.data.clone());
                v.push(vt.data.clone());
            }
            Ok((m, v))
        };
        let (gm, gv) = restore_moments("opt_g", &state.g_store)?;
        let t_g = file.meta["adam_t_g"].as_u64().unwrap_or(0);
        state.adam_g.restore(gm, gv, t_g);
        let (dm, dv) = restore_moments("opt_d", &state.d_store)?;
        let t_d = file.meta["adam_t_d"].as_u64().unwrap_or(0);
        state.adam_d.restore(dm, dv, t_d);

        state.step = file.meta["step"].as_u64().unwrap_or(0);
        state.consecutive_skips = file.meta["consecutive_skips"].as_u64().unwrap_or(0) as u32;
        state.nan_events = file.meta["nan_events"].as_u64().unwrap_or(0);
        state.counters = serde_json::from_value(file.meta["counters"].clone())
            .map_err(|e| Error::Incompatible(format!("counters block: {e}")))?;

        let rng_meta = &file.meta["rng"];
        let seed = hex_decode(rng_meta["seed"].as_str().unwrap_or(""))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rng_meta["stream"].as_u64().unwrap_or(0));
        let word_pos: u128 = rng_meta["word_pos"]
            .as_str()
            .unwrap_or("0")
            .parse()
            .map_err(|_| Error::Incompatible("rng word_pos".into()))?;
        rng.set_word_pos(word_pos);
        state.rng = rng;
        Ok(state)
    }

    /// Publishes the generator weights alone (f32 payload) for conversion.
    pub fn export_generator(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        export_generator_params(&self.cfg.effective_generator(), &self.g_store, path)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Incompatible("rng seed must be 32 hex bytes".into()));
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Incompatible("rng seed hex".into()))?;
    }
    Ok(out)
}

pub fn export_generator_params(
    cfg: &GeneratorConfig,
    g_store: &ParamStore,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let meta = json!({ "kind": "generator", "generator": cfg });
    let tensors: Vec<(&str, &Tensor)> = g_store
        .iter()
        .filter(|(name, _)| name.starts_with("g."))
        .collect();
    checkpoint::save(path, meta, tensors.into_iter(), Dtype::F32)
}

/// Rebuilds a generator (and its parameter store) from any checkpoint that
/// carries `g.*` tensors: a published generator file or a full training
/// checkpoint.
pub fn load_generator(path: impl AsRef<std::path::Path>) -> Result<(Generator, ParamStore)> {
    let file = checkpoint::load(path)?;
    let cfg_value = file
        .meta
        .get("generator")
        .cloned()
        .or_else(|| file.meta.get("config").and_then(|c| c.get("generator")).cloned())
        .ok_or_else(|| Error::Incompatible("checkpoint carries no generator config".into()))?;
    let mut cfg: GeneratorConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::Incompatible(format!("generator config: {e}")))?;
    // a full training checkpoint stores the pre-ablation config
    if let Some(c) = file.meta.get("config") {
        let tc: TrainConfig = serde_json::from_value(c.clone())
            .map_err(|e| Error::Incompatible(format!("config block: {e}")))?;
        cfg = tc.effective_generator();
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let generator = Generator::new(cfg, &mut store, &mut rng)?;
    for i in 0..store.len() {
        let id = crate::params::ParamId(i);
        let name = store.name(id).to_string();
        let t = file
            .tensor(&name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
        if t.shape != store.value(id).shape {
            return Err(Error::Incompatible(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape,
                store.value(id).shape
            )));
        }
        store.value_mut(id).data = t.data.clone();
    }
    Ok((generator, store))
}

// ── synthetic desk-scale domains ─────────────────────────────────────

/// Two synthetic mel-like domains of `bands x frames` samples in [-1, 1]:
/// harmonic stacks whose fundamentals sit low on the band axis for domain
/// A and high for domain B, with slow amplitude modulation and noise.
pub fn make_toy_domains_sized(
    seed: u64,
    samples: usize,
    bands: usize,
    frames: usize,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let mut domain = |lo: f64, hi: f64| -> Vec<Tensor> {
        (0..samples)
            .map(|_| {
                let f0 = rng.gen_range(lo..hi);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let mod_rate = rng.gen_range(1.0..3.0);
                let mut data = vec![0.0; bands * frames];
                for t in 0..frames {
                    let env = 1.0 + 0.3 * (std::f64::consts::TAU * mod_rate * t as f64
                        / frames as f64
                        + phase)
                        .sin();
                    let mut k = 1.0;
                    while k * f0 < bands as f64 - 1.0 {
                        let center = k * f0;
                        let amp = env / (k * k);
                        let b0 = (center - 4.0).max(0.0) as usize;
                        let b1 = ((center + 4.0) as usize).min(bands - 1);
                        for b in b0..=b1 {
                            let d = b as f64 - center;
                            data[b * frames + t] += amp * (-d * d / (2.0 * 1.2 * 1.2)).exp();
                        }
                        k += 1.0;
                    }
                }
                for v in data.iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
                // per-sample min-max into [-1, 1]
                let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in data.iter_mut() {
                    *v = 2.0 * (*v - lo) / (hi - lo) - 1.0;
                }
                Tensor::new(vec![1, bands, frames], data)
            })
            .collect()
    };
    let a = domain(6.0, 14.0);
    let b = domain(40.0, 56.0);
    (a, b)
}

/// Default-sized toy domains: eight 80x184 samples per side.
pub fn make_toy_domains(seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    make_toy_domains_sized(seed, 8, 80, 184)
}

/// Energy centroid along the band axis (energies shifted to [0, 1]).
pub fn band_centroid(t: &Tensor) -> f64 {
    let bands = t.shape[1];
    let frames = t.shape[2];
    let mut num = 0.0;
    let mut den = 0.0;
    for b in 0..bands {
        let e: f64 = (0..frames).map(|f| (t.data[b * frames + f] + 1.0) / 2.0).sum();
        num += b as f64 * e;
        den += e;
    }
    num / den
}

/// Deterministic toy training run; `on_step` sees every report.
pub fn run_toy<F>(cfg: &TrainConfig, mut on_step: F) -> Result<(TrainState, Vec<LossReport>)>
where
    F: FnMut(u64, f64, &LossReport),
{
    let mut state = TrainState::new(cfg.clone())?;
    let (a, b) = make_toy_domains_sized(cfg.seed, cfg.samples_per_domain, cfg.bands, cfg.frames);
    let reports = run_toy_steps(&mut state, &a, &b, cfg.steps, &mut on_step)?;
    Ok((state, reports))
}

/// Continues an existing state over `steps` further steps.
pub fn run_toy_steps<F>(
    state: &mut TrainState,
    domain_a: &[Tensor],
    domain_b: &[Tensor],
    steps: u64,
    on_step: &mut F,
) -> Result<Vec<LossReport>>
where
    F: FnMut(u64, f64, &LossReport),
{
    let mut reports = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let ix = state.rng.gen_range(0..domain_a.len());
        let iy = state.rng.gen_range(0..domain_b.len());
        let lr = state.current_lr();
        let x = domain_a[ix].clone();
        let y = domain_b[iy].clone();
        let r = state.train_step(&x, &y)?;
        on_step(state.step, lr, &r);
        reports.push(r);
    }
    Ok(reports)
}

pub const LOG_HEADER: &str = "step,lr,gan_g,gan_d,nce_x,nce_y,total";

pub fn log_line(step: u64, lr: f64, r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        step, lr, r.gan_g, r.gan_d, r.nce_x, r.nce_y, r.total
    )
}

pub fn write_log_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")
}
