//! Mel-spectrogram frontend: 24 kHz signal chain with 80 HTK-mel bands,
//! 1024-point Hann STFT at hop 256 over 80-7600 Hz, log compression, and
//! per-utterance min-max normalization into [-1, 1].
//!
//! Framing is center-less: frames lie fully inside the signal and the
//! frame count is exactly 1 + floor((n - win) / hop). Two-second segments
//! are cut without padding; a trailing partial segment is discarded.

pub mod melb;
pub mod wav;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub segment_seconds: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            sample_rate: 24_000,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
            segment_seconds: 2.0,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config(format!(
                "need fmin < fmax <= sample_rate/2, got {} / {} / {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if !(self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::config(format!(
                "need hop <= win <= n_fft, got {} / {} / {}",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.hop_length == 0 {
            return Err(Error::config("n_mels and hop_length must be positive"));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate as f64).round() as usize
    }

    /// Frames produced by a signal of `n` samples under center-less framing.
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.win_length {
            0
        } else {
            1 + (n - self.win_length) / self.hop_length
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, peak 1, rows = filters over FFT bins.
pub fn mel_filterbank(cfg: &SignalConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            fb[m * bins + k] = rise.min(fall).max(0.0);
        }
    }
    fb
}

/// Center frequency of each filter, from the mel-spaced edges.
pub fn filter_centers(cfg: &SignalConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    (0..cfg.n_mels)
        .map(|m| mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// STFT magnitudes, [frames x bins], periodic Hann window, no centering.
pub fn stft_magnitudes(samples: &[f64], cfg: &SignalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let frames = cfg.frame_count(samples.len());
    if frames == 0 {
        return Err(Error::config(format!(
            "input of {} samples is shorter than one {}-sample analysis window",
            samples.len(),
            cfg.win_length
        )));
    }
    let bins = cfg.n_fft / 2 + 1;
    let window: Vec<f64> = (0..cfg.win_length)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut out = vec![0.0; frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..frames {
        let start = t * cfg.hop_length;
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for i in 0..cfg.win_length {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[t * bins + k] = buf[k].norm();
        }
    }
    Ok(out)
}

/// 80 x T log-mel matrix, optionally normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub bands: usize,
    pub frames: usize,
    /// Row-major by band: data[band * frames + frame].
    pub data: Vec<f64>,
    /// Pre-normalization extrema, kept for exact inversion.
    pub norm_min: f64,
    pub norm_max: f64,
    pub normalized: bool,
}

impl MelSpectrogram {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.bands, self.frames], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor, norm_min: f64, norm_max: f64) -> Result<Self> {
        if t.shape.len() != 3 || t.shape[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "mel_from_tensor",
                lhs: t.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(MelSpectrogram {
            bands: t.shape[1],
            frames: t.shape[2],
            data: t.data.clone(),
            norm_min,
            norm_max,
            normalized: true,
        })
    }
}

/// Log-mel extraction: Hann STFT magnitude, triangular HTK filterbank,
/// log10 with a 1e-10 floor. Unnormalized.
pub fn mel_spectrogram(samples: &[f64], cfg: &SignalConfig) -> Result<MelSpectrogram> {
    let mags = stft_magnitudes(samples, cfg)?;
    let bins = cfg.n_fft / 2 + 1;
    let frames = mags.len() / bins;
    let fb = mel_filterbank(cfg);
    let mut data = vec![0.0; cfg.n_mels * frames];
    for t in 0..frames {
        let spec = &mags[t * bins..(t + 1) * bins];
        for m in 0..cfg.n_mels {
            let row = &fb[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(spec.iter()).map(|(a, b)| a * b).sum();
            data[m * frames + t] = e.max(1e-10).log10();
        }
    }
    let (lo, hi) = min_max(&data);
    Ok(MelSpectrogram {
        bands: cfg.n_mels,
        frames,
        data,
        norm_min: lo,
        norm_max: hi,
        normalized: false,
    })
}

fn min_max(data: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Per-utterance min-max normalization into [-1, 1]; a constant input maps
/// to all zeros.
pub fn normalize(mel: &MelSpectrogram) -> MelSpectrogram {
    let (lo, hi) = min_max(&mel.data);
    let span = hi - lo;
    let data = if span == 0.0 {
        vec![0.0; mel.data.len()]
    } else {
        mel.data.iter().map(|&v| 2.0 * (v - lo) / span - 1.0).collect()
    };
    MelSpectrogram {
        bands: mel.bands,
        frames: mel.frames,
        data,
        norm_min: lo,
        norm_max: hi,
        normalized: true,
    }
}

/// Exact inverse of [`normalize`] using the stored extrema.
pub fn denormalize(mel: &MelSpectrogram) -> MelSpectrogram {
    let (lo, hi) = (mel.norm_min, mel.norm_max);
    let half_span = (hi - lo) / 2.0;
    let data = mel.data.iter().map(|&v| (v + 1.0) * half_span + lo).collect();
    MelSpectrogram {
        bands: mel.bands,
        frames: mel.frames,
        data,
        norm_min: lo,
        norm_max: hi,
        normalized: false,
    }
}

/// Consecutive non-overlapping segments of `segment_seconds`; the final
/// partial window is discarded, never padded.
pub fn segment(samples: &[f64], cfg: &SignalConfig) -> Vec<Vec<f64>> {
    let n = cfg.segment_samples();
    samples.chunks_exact(n).map(|c| c.to_vec()).collect()
}
