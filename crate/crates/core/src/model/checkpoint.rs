//! Checkpoint files: a JSON manifest (version, config, step, seed, tensor
//! table with per-tensor CRC32 checksums) next to a flat little-endian
//! f32 binary holding the tensors in layout order. The binary sits at the
//! manifest path with `.bin` appended.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::{Model, ModelConfig, ParamLayout};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element offset into the binary file.
    offset: usize,
    len: usize,
    crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    step: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Step and seed recorded alongside a loaded model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
}

fn bin_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn save_checkpoint(model: &Model, step: usize, seed: u64, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut bytes = Vec::with_capacity(model.params.len() * 4);
    let mut tensors = Vec::new();
    for (name, slot) in model.layout.named_slots() {
        let start = bytes.len();
        for &v in &model.params[slot.range()] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: slot.rows,
            cols: slot.cols,
            offset: slot.off,
            len: slot.len(),
            crc32: crc32(&bytes[start..]),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        step,
        seed,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, json)?;
    std::fs::write(bin_path(path), bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    let json = std::fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let layout = ParamLayout::new(&manifest.config);
    if manifest.tensors.len() != layout.named_slots().len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match config ({} expected)",
            manifest.tensors.len(),
            layout.named_slots().len()
        )));
    }
    let bytes = std::fs::read(bin_path(path))?;
    if bytes.len() != 4 * layout.total {
        return Err(Error::Checkpoint(format!(
            "binary payload has {} bytes, expected {}",
            bytes.len(),
            4 * layout.total
        )));
    }
    let mut params = vec![0.0f64; layout.total];
    for (entry, (name, slot)) in manifest.tensors.iter().zip(layout.named_slots()) {
        if entry.name != *name
            || entry.rows != slot.rows
            || entry.cols != slot.cols
            || entry.offset != slot.off
        {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' does not match the expected layout",
                entry.name
            )));
        }
        let byte_range = 4 * slot.off..4 * (slot.off + slot.len());
        let chunk = &bytes[byte_range];
        let crc = crc32(chunk);
        if crc != entry.crc32 {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch in tensor '{}' ({crc:#x} vs {:#x})",
                entry.name, entry.crc32
            )));
        }
        for (i, win) in chunk.chunks_exact(4).enumerate() {
            params[slot.off + i] = f32::from_le_bytes([win[0], win[1], win[2], win[3]]) as f64;
        }
    }
    let model = Model {
        config: manifest.config,
        layout,
        params,
    };
    Ok((
        model,
        CheckpointMeta {
            step: manifest.step,
            seed: manifest.seed,
        },
    ))
}

/// Round-trips a freshly initialized model through the checkpoint format.
/// Exposed for tests and the CLI's self-checks.
pub fn roundtrip_precision_bound(model: &Model) -> f64 {
    model
        .params
        .iter()
        .map(|v| (*v - (*v as f32) as f64).abs())
        .fold(0.0, f64::max)
}
