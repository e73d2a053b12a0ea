//! SMCK checkpoint files.
//!
//! Layout: magic `SMCK`, u32 LE version, u64 LE training step, u64 LE
//! FNV-1a fingerprint of the record region, u32 LE record count, then per
//! parameter: u32 LE name length, name bytes, u32 LE ndim, u32 LE dims,
//! f64 LE payload. Records are written in sorted name order, so identical
//! parameters always produce identical bytes.

use std::fs;
use std::path::Path;

use crate::augment::fnv1a64;
use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, step: u64, params: &Params) -> Result<()> {
    let mut records = Vec::new();
    let mut count = 0u32;
    for (name, t) in params.iter() {
        records.extend_from_slice(&(name.len() as u32).to_le_bytes());
        records.extend_from_slice(name.as_bytes());
        records.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            records.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            records.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let mut out = Vec::with_capacity(24 + records.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&fnv1a64(&records).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&records);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(u64, Params)> {
    let bytes = fs::read(path)?;
    parse(&bytes).map_err(|msg| Error::Checkpoint(format!("{}: {msg}", path.display())))
}

fn parse(bytes: &[u8]) -> std::result::Result<(u64, Params), String> {
    if bytes.len() < 28 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic (want SMCK)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let fingerprint = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let records = &bytes[28..];
    if fnv1a64(records) != fingerprint {
        return Err("fingerprint mismatch: file corrupt".into());
    }

    let mut params = Params::default();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
        if *pos + n > records.len() {
            return Err("record overruns file".into());
        }
        let s = &records[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| "parameter name is not UTF-8".to_string())?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, t);
    }
    if pos != records.len() {
        return Err(format!("{} trailing bytes after records", records.len() - pos));
    }
    Ok((step, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.smck");
        let p2 = dir.path().join("b.smck");
        let model = Model::new(ModelConfig::tiny(12, 8), 7).unwrap();
        save_checkpoint(&p1, 42, &model.params).unwrap();
        let (step, loaded) = load_checkpoint(&p1).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded.len(), model.params.len());
        save_checkpoint(&p2, 42, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.smck");
        let model = Model::new(ModelConfig::tiny(12, 8), 8).unwrap();
        save_checkpoint(&path, 1, &model.params).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("fingerprint"));

        fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
