//! Minimal RIFF/WAVE reader and writer for 16-bit mono PCM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Waveform;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes).map_err(|msg| Error::Input(format!("{}: {msg}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut sample_rate = 0u32;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(format!("chunk {:?} overruns file", String::from_utf8_lossy(id)));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too short".into());
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(format!("unsupported WAV format code {format} (want PCM)"));
                }
                if channels != 1 {
                    return Err(format!("unsupported channel count {channels} (want mono)"));
                }
                if bits != 16 {
                    return Err(format!("unsupported bit depth {bits} (want 16)"));
                }
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
        // Chunks are word-aligned: odd sizes carry one pad byte.
        pos = body_end + (size & 1);
    }
    let data = data.ok_or("missing data chunk")?;
    if sample_rate == 0 {
        return Err("missing fmt chunk".into());
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate).map_err(|e| e.to_string())
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..2000).map(|i| (0.01 * i as f64).sin() * 0.8).collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), samples.len());
        for (a, b) in r.samples.iter().zip(&samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_stereo_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Input(_))));
    }
}
