//! Binary checkpoint format.
//!
//! Layout: magic `CVTK`, u32 version, length-prefixed TOML config, u32 tensor
//! count, then per-tensor records (u32 name length + bytes, u32 rank, dims as
//! u64, raw f32 little-endian payload), and a trailing FNV-1a 64-bit checksum
//! of all preceding bytes. Parameters and batch-norm running statistics are
//! both stored, so a round trip reproduces the forward pass bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{CvtError, Result};
use crate::model::{build_model, CvtModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CVTK";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// FNV-1a 64 digest of a whole file (e.g. to compare checkpoints).
pub fn file_checksum(path: impl AsRef<Path>) -> Result<u64> {
    Ok(fnv1a64(&fs::read(path)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CvtError::CheckpointTruncated { reading: what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn collect_tensors(model: &CvtModel<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut records = Vec::new();
    model.visit_params(&mut |name, t| {
        records.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    model.visit_buffers_mut(&mut |name, buf| {
        records.push((name, vec![buf.len()], buf.clone()));
    });
    records
}

pub fn save_checkpoint(model: &CvtModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_text =
        toml::to_string(&model.config).map_err(|e| CvtError::Parse(e.to_string()))?;
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    let records = collect_tensors(model);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, data) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CvtModel<f32>> {
    let buf = fs::read(path)?;
    if buf.len() < 12 {
        return Err(CvtError::CheckpointTruncated { reading: "header" });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(CvtError::CheckpointChecksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CvtError::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CvtError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| CvtError::Parse(e.to_string()))?;
    let config: ModelConfig =
        toml::from_str(config_text).map_err(|e| CvtError::Parse(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| CvtError::Parse(e.to_string()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (shape, data));
    }

    let mut model: CvtModel<f32> = build_model(config, 0)?;
    let mut missing: Vec<String> = Vec::new();
    model.visit_params_mut(&mut |name, t| {
        match tensors.remove(&name) {
            Some((shape, data)) if shape == t.shape() => {
                *t = Tensor::param(data, &shape).unwrap();
            }
            Some(_) | None => missing.push(name),
        }
    });
    model.visit_buffers_mut(&mut |name, buf| {
        match tensors.remove(&name) {
            Some((shape, data)) if shape == [buf.len()] => *buf = data,
            Some(_) | None => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(CvtError::ConfigMismatch(format!(
            "missing or mis-shaped tensors: {}",
            missing.join(", ")
        )));
    }
    if !tensors.is_empty() {
        let mut extra: Vec<String> = tensors.into_keys().collect();
        extra.sort();
        return Err(CvtError::ConfigMismatch(format!(
            "unexpected tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}

/// Load and require the stored config to equal `expected`.
pub fn load_checkpoint_expect(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<CvtModel<f32>> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(CvtError::ConfigMismatch(format!(
            "checkpoint holds '{}' but '{}' was expected",
            model.config.name, expected.name
        )));
    }
    Ok(model)
}
