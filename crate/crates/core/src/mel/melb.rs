//! MELB binary container for normalized mel spectrograms.
//!
//! Layout: magic `MELB`, u32 version = 1, u32 bands, u32 frames,
//! f32 norm_min, f32 norm_max, then bands*frames little-endian f32 values,
//! row-major by band.

use std::fs;
use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MELB";
pub const VERSION: u32 = 1;

pub fn write_melb(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(24 + mel.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.bands as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames as u32).to_le_bytes());
    out.extend_from_slice(&(mel.norm_min as f32).to_le_bytes());
    out.extend_from_slice(&(mel.norm_max as f32).to_le_bytes());
    for &v in &mel.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_melb(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let bytes = fs::read(path)?;
    let need = |off: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes.get(off..off + len).ok_or(Error::Parse {
            offset: off as u64,
            message: format!("truncated while reading {what}"),
        })
    };
    if need(0, 4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "missing MELB magic".into() });
    }
    let u32_at = |off: usize, what: &str| -> Result<u32> {
        let b = need(off, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = u32_at(4, "version")?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("MELB version {version}")));
    }
    let bands = u32_at(8, "bands")? as usize;
    let frames = u32_at(12, "frames")? as usize;
    let f32_at = |off: usize, what: &str| -> Result<f32> {
        let b = need(off, 4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let norm_min = f32_at(16, "norm_min")? as f64;
    let norm_max = f32_at(20, "norm_max")? as f64;
    let n = bands
        .checked_mul(frames)
        .ok_or_else(|| Error::config("MELB dimensions overflow"))?;
    let payload = need(24, n * 4, "sample payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(MelSpectrogram { bands, frames, data, norm_min, norm_max, normalized: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_mel() -> MelSpectrogram {
        MelSpectrogram {
            bands: 3,
            frames: 4,
            data: (0..12).map(|i| (i as f64 / 11.0) * 2.0 - 1.0).collect(),
            norm_min: -9.5,
            norm_max: 1.25,
            normalized: true,
        }
    }

    #[test]
    fn round_trip_preserves_f32_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.melb");
        let mel = sample_mel();
        write_melb(&p, &mel).unwrap();
        let back = read_melb(&p).unwrap();
        assert_eq!(back.bands, 3);
        assert_eq!(back.frames, 4);
        for (a, b) in mel.data.iter().zip(back.data.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back.norm_min as f32, -9.5);
        assert_eq!(back.norm_max as f32, 1.25);
    }

    #[test]
    fn bad_magic_is_parse_error_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.melb");
        std::fs::write(&p, b"NOPE").unwrap();
        match read_melb(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.melb");
        let mel = sample_mel();
        write_melb(&p, &mel).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_melb(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 24),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
