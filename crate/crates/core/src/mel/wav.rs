//! RIFF/WAVE ingestion (PCM 16-bit and IEEE float 32-bit), PCM-16 output,
//! and windowed-sinc resampling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| parse_err(offset as u64, format!("truncated while reading {what}")))
}

fn u16_at(bytes: &[u8], offset: usize, what: &str) -> Result<u16> {
    let b = take(bytes, offset, 2, what)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn u32_at(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let b = take(bytes, offset, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Loads a mono or first-channel WAV as samples in [-1, 1] plus its rate.
/// Handles PCM 16-bit and IEEE float 32-bit.
pub fn load_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let bytes = fs::read(path)?;
    if take(&bytes, 0, 4, "RIFF magic")? != b"RIFF" {
        return Err(parse_err(0, "missing RIFF magic"));
    }
    if take(&bytes, 8, 4, "WAVE magic")? != b"WAVE" {
        return Err(parse_err(8, "missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = take(&bytes, pos, 4, "chunk id")?;
        let size = u32_at(&bytes, pos + 4, "chunk size")? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                let format = u16_at(&bytes, body, "audio format")?;
                let channels = u16_at(&bytes, body + 2, "channel count")?;
                let rate = u32_at(&bytes, body + 4, "sample rate")?;
                let bits = u16_at(&bytes, body + 14, "bits per sample")?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                take(&bytes, body, size, "data chunk")?;
                data = Some((body, size));
            }
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| parse_err(12, "no fmt chunk found"))?;
    let (data_off, data_len) = data.ok_or_else(|| parse_err(12, "no data chunk found"))?;
    if channels == 0 {
        return Err(parse_err(data_off as u64, "zero channels"));
    }
    let ch = channels as usize;
    let samples = match (format, bits) {
        (1, 16) => {
            let frame = 2 * ch;
            let n = data_len / frame;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let o = data_off + i * frame;
                let v = i16::from_le_bytes([bytes[o], bytes[o + 1]]);
                out.push(v as f64 / 32768.0);
            }
            out
        }
        (3, 32) => {
            let frame = 4 * ch;
            let n = data_len / frame;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let o = data_off + i * frame;
                let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
                out.push(v as f64);
            }
            out
        }
        (f, b) => {
            return Err(Error::Unsupported(format!(
                "WAV codec: format tag {f} at {b} bits (PCM-16 and float-32 supported)"
            )))
        }
    };
    Ok((samples, rate))
}

/// Writes mono PCM 16-bit. Values are rounded to the nearest step of
/// 1/32768 and clamped.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Windowed-sinc polyphase resampling. Output length is
/// round(n * to / from); identical rates pass through unchanged.
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    // cutoff slightly under the narrower Nyquist, in cycles per input sample
    let fc = 0.5 * ratio.min(1.0) * 0.95;
    let half_width = 32usize;
    let n = samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 / ratio;
        let i0 = (t.floor() as isize - half_width as isize + 1).max(0);
        let i1 = (t.floor() as isize + half_width as isize).min(n - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for i in i0..=i1 {
            let u = i as f64 - t;
            let sinc = if u == 0.0 {
                1.0
            } else {
                let x = std::f64::consts::PI * 2.0 * fc * u;
                x.sin() / x
            };
            let hann = 0.5 + 0.5 * (std::f64::consts::PI * u / half_width as f64).cos();
            let w = sinc * hann;
            acc += w * samples[i as usize];
            wsum += w;
        }
        out.push(if wsum != 0.0 { acc / wsum } else { 0.0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn int16_scaling_definition() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.wav");
        write_wav(&p, &[0.5, 0.0, -0.5], 24_000).unwrap();
        let (s, rate) = load_wav(&p).unwrap();
        assert_eq!(rate, 24_000);
        assert_eq!(s[0], 16384.0 / 32768.0);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], -0.5);
    }

    #[test]
    fn silence_round_trips_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quiet.wav");
        write_wav(&p, &[0.0; 256], 24_000).unwrap();
        let (s, _) = load_wav(&p).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert_eq!(s.len(), 256);
    }

    #[test]
    fn random_samples_round_trip_within_one_lsb() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..1000).map(|_| rng.gen_range(-0.99..0.99)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noise.wav");
        write_wav(&p, &samples, 48_000).unwrap();
        let (back, _) = load_wav(&p).unwrap();
        for (a, b) in samples.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"JUNKdata").unwrap();
        let err = load_wav(&p).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::write(&p, b"RIFF\x00\x00\x00\x00NOPE").unwrap();
        match load_wav(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unsupported_codec_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("alaw.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&28u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&6u16.to_le_bytes()); // a-law
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_wav(&p).unwrap_err(), Error::Unsupported(_)));
    }

    #[test]
    fn first_channel_of_stereo() {
        // hand-build a 2-channel PCM file: L = 0.25, R = -0.75
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let l = (0.25f64 * 32768.0) as i16;
        let r = (-0.75f64 * 32768.0) as i16;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&24000u32.to_le_bytes());
        bytes.extend_from_slice(&96000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&l.to_le_bytes());
            bytes.extend_from_slice(&r.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let (s, _) = load_wav(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn resample_identity() {
        let x = vec![0.1, -0.2, 0.3];
        assert_eq!(resample(&x, 24_000, 24_000), x);
    }

    #[test]
    fn resample_preserves_dc() {
        let x = vec![0.5; 4000];
        let y = resample(&x, 48_000, 24_000);
        assert_eq!(y.len(), 2000);
        for &v in &y[100..1900] {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn downsampled_sine_keeps_frequency_and_amplitude() {
        let from = 48_000u32;
        let to = 24_000u32;
        let f = 1000.0;
        let x: Vec<f64> = (0..from as usize)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / from as f64).sin())
            .collect();
        let y = resample(&x, from, to);
        assert_eq!(y.len(), to as usize);
        // interior samples must match a unit 1 kHz sine at the new rate
        let mut worst = 0.0f64;
        for i in 1000..y.len() - 1000 {
            let want = (2.0 * std::f64::consts::PI * f * i as f64 / to as f64).sin();
            worst = worst.max((y[i] - want).abs());
        }
        assert!(worst < 0.01, "worst interior deviation {worst}");
    }
}
