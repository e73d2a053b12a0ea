//! SMF1 on-disk format for feature matrices.
//!
//! Layout: magic `SMF1`, u32 LE rows, u32 LE cols, f32 LE row-major payload,
//! trailing u16 LE frame shift in 0.1 ms units. The utterance id is not
//! stored; readers take it from the file stem.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

const MAGIC: &[u8; 4] = b"SMF1";

pub fn write_smf(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(14 + f.rows() * f.cols() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let shift_units = (f.frame_shift_ms * 10.0).round() as u16;
    out.extend_from_slice(&shift_units.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_smf(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path)?;
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_smf(&bytes, utt_id).map_err(|msg| Error::Input(format!("{}: {msg}", path.display())))
}

fn parse_smf(bytes: &[u8], utt_id: String) -> std::result::Result<FeatureMatrix, String> {
    if bytes.len() < 14 {
        return Err("file shorter than SMF1 header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic (want SMF1)".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 12 + rows * cols * 4 + 2;
    if bytes.len() != want {
        return Err(format!("size mismatch: {} bytes for {rows}x{cols} (want {want})", bytes.len()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..12 + rows * cols * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let shift_units = u16::from_le_bytes(bytes[want - 2..].try_into().unwrap());
    FeatureMatrix::new(utt_id, rows, cols, data, shift_units as f64 / 10.0).map_err(|e| e.to_string())
}
