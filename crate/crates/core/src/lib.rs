//! VCTR voice-conversion stack.
//!
//! A self-contained CPU implementation of a contrastive, adversarially
//! trained mel-spectrogram translator:
//!
//! - [`tensor`] — dense f64 tensors with reverse-mode autodiff on a tape
//! - [`dpsa`] — Dual Pruned Self-Attention (row/column token scoring,
//!   top-`n_s` pruning, temperature-free attention)
//! - [`generator`] — conv stem, Hybrid Perception Blocks, conv decoder
//! - [`discriminator`] — 70x70 PatchGAN over spectrogram patches
//! - [`losses`] — adversarial loss, multi-layer PatchNCE, weighted total
//! - [`mel`] — WAV ingestion, resampling, log-mel extraction, MELB format
//! - [`training`] — Adam, lr schedule, alternating G/D loop, checkpoints
//! - [`bench`] — exact MAC accounting and wall-time kernels for the
//!   dense-vs-pruned attention comparison
//!
//! Everything is deterministic for a fixed seed: single-threaded,
//! fixed-order arithmetic, counter-based RNG.

pub mod bench;
pub mod checkpoint;
pub mod discriminator;
pub mod dpsa;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod mel;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{NodeId, PadMode, Tape, Tensor};
