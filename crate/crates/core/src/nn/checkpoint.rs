//! Checkpoint files.
//!
//! ```text
//! magic        8 bytes  "PESCKPT\0"
//! version      u32 LE   1
//! header_len   u32 LE
//! header       JSON     CheckpointHeader
//! param_count  u64 LE
//! params       f64 LE x param_count
//! ```
//!
//! Parameters are stored bit-exactly; optimizer moments are not saved.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Arch, ModelState};
use crate::datagen::Modality;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PESCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub schema_hash: String,
    pub stage: String,
    pub epoch: usize,
    /// Validation metric at save time, if one was computed.
    pub metric: Option<f64>,
    /// Input streams the model expects.
    #[serde(default)]
    pub modality: Option<Modality>,
}

pub fn encode_checkpoint(header: &CheckpointHeader, model: &ModelState) -> Result<Vec<u8>> {
    if header.arch != model.arch {
        return Err(Error::Checkpoint("header architecture differs from the model".into()));
    }
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + head.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelState)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let head_len = read_u32(&mut r)? as usize;
    if head_len > r.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let (head, rest) = r.split_at(head_len);
    let header: CheckpointHeader = serde_json::from_slice(head)?;
    r = rest;
    let mut count = [0u8; 8];
    read_exact(&mut r, &mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if r.len() != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {count} parameters, found {} bytes",
            r.len()
        )));
    }
    let params = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let model = ModelState::from_params(header.arch.clone(), params)
        .map_err(|e| Error::Checkpoint(format!("invalid parameters: {e}")))?;
    Ok((header, model))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, model: &ModelState) -> Result<()> {
    let bytes = encode_checkpoint(header, model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointHeader, ModelState) {
        let arch = Arch {
            inputs: vec![4, 3],
            hidden: 3,
            embed: 5,
            classes: 14,
        };
        let model = ModelState::init(arch.clone(), 9).unwrap();
        let header = CheckpointHeader {
            arch,
            schema_hash: "abc".into(),
            stage: "stage3".into(),
            epoch: 17,
            metric: Some(0.1 + 0.2),
            modality: Some(Modality::RgbFlow),
        };
        (header, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (header, model) = sample();
        let bytes = encode_checkpoint(&header, &model).unwrap();
        let (h2, m2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(h2.metric.unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        let a: Vec<u64> = model.params.iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = m2.params.iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode_checkpoint(&h2, &m2).unwrap(), bytes);
    }

    #[test]
    fn layout_of_the_prefix() {
        let (header, model) = sample();
        let bytes = encode_checkpoint(&header, &model).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let head_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count_at = 16 + head_len;
        let count = u64::from_le_bytes(bytes[count_at..count_at + 8].try_into().unwrap());
        assert_eq!(count as usize, model.num_params());
        assert_eq!(bytes.len(), count_at + 8 + 8 * model.num_params());
        let first = f64::from_le_bytes(bytes[count_at + 8..count_at + 16].try_into().unwrap());
        assert_eq!(first.to_bits(), model.params[0].to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (header, model) = sample();
        let bytes = encode_checkpoint(&header, &model).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_checkpoint(&bad).unwrap_err().category(), "checkpoint");
        assert!(decode_checkpoint(&bytes[..10]).is_err());
    }
}
