//! Checkpoint container: magic `SPVN`, a u32 format version, then a u32
//! tensor count followed by length-prefixed named tensors. All integers and
//! reals are little-endian; tensor payloads are 32-bit reals.
//!
//! Layout per tensor: `name_len: u32`, `name: [u8]` (UTF-8), `count: u32`,
//! `values: [f32; count]`.

use super::NasError;
use crate::nn::TensorStore;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPVN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(path: &Path, reason: impl Into<String>) -> NasError {
    NasError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes every tensor (parameters and buffers) in store order.
pub fn save_checkpoint(store: &TensorStore, path: &Path) -> Result<(), NasError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        let data = store.get(id);
        bytes.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| err(path, e.to_string()))
}

/// Loads a checkpoint into an existing store by tensor name. Every stored
/// tensor must exist in the target with the same length, and every target
/// tensor must be covered.
pub fn load_checkpoint_into(store: &mut TensorStore, path: &Path) -> Result<(), NasError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(path, e.to_string()))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], NasError> {
        if *cursor + n > bytes.len() {
            return Err(err(path, "truncated checkpoint"));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32, NasError> {
        Ok(u32::from_le_bytes(
            take(cursor, 4)?.try_into().expect("4 bytes"),
        ))
    };

    if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
        return Err(err(path, "bad magic (expected SPVN)"));
    }
    let version = take_u32(&mut cursor)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(path, format!("unsupported version {version}")));
    }
    let count = take_u32(&mut cursor)? as usize;
    let mut covered = vec![false; store.len()];
    for _ in 0..count {
        let name_len = take_u32(&mut cursor)? as usize;
        let name = std::str::from_utf8(take(&mut cursor, name_len)?)
            .map_err(|_| err(path, "tensor name is not UTF-8"))?
            .to_string();
        let value_count = take_u32(&mut cursor)? as usize;
        let raw = take(&mut cursor, value_count * 4)?;
        let id = store.find(&name).ok_or_else(|| {
            err(
                path,
                format!("unknown tensor `{name}` for this architecture"),
            )
        })?;
        let dst = store.get_mut(id);
        if dst.len() != value_count {
            return Err(err(
                path,
                format!(
                    "tensor `{name}` has {value_count} values, architecture expects {}",
                    dst.len()
                ),
            ));
        }
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        covered[id.0] = true;
    }
    if cursor != bytes.len() {
        return Err(err(path, "trailing bytes after the last tensor"));
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        let name = store
            .ids()
            .nth(missing)
            .map(|id| store.name(id).to_string())
            .unwrap_or_default();
        return Err(err(
            path,
            format!("tensor `{name}` missing from checkpoint"),
        ));
    }
    Ok(())
}
