//! `EMB1` / `LOC1` binary container codecs.
//!
//! Layouts (all integers little-endian, floats IEEE-754 LE; see
//! `docs/formats.md`):
//!
//! ```text
//! EMB1: "EMB1" | u32 count | u32 dim | count * entry
//!       entry: u16 id_len | id bytes (UTF-8) | dim * f32
//! LOC1: "LOC1" | u32 count | u32 dim | count * entry
//!       entry: u16 id_len | id bytes (UTF-8) | u32 n_points | n_points * dim * f32
//! ```
//!
//! Loading validates every stated invariant (finite values, unique nonempty
//! ids, consistent dimensions) and reports the byte offset of the first
//! violation; save → load → save reproduces the file bit-for-bit.

use std::path::Path;

use super::wire::{Reader, Writer};
use super::{EmbeddingSet, ImageId, LocalDescriptorSet};
use crate::error::{Error, Result};

const EMB1_MAGIC: &[u8; 4] = b"EMB1";
const LOC1_MAGIC: &[u8; 4] = b"LOC1";

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let count: u32 = set
        .len()
        .try_into()
        .map_err(|_| Error::validation("embedding set too large for EMB1 (u32 count)"))?;
    let mut w = Writer::create(path)?;
    w.magic(EMB1_MAGIC)?;
    w.u32(count)?;
    w.u32(set.dim() as u32)?;
    for (id, values) in set.iter() {
        w.short_string(id.as_str())?;
        w.f32_slice(values)?;
    }
    w.finish()
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = Reader::open(path)?;
    r.magic(EMB1_MAGIC, "embedding store")?;
    let count = r.u32()?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(r.error_at(8, "descriptor dimension must be positive"));
    }
    let mut set = EmbeddingSet::new(dim);
    for _ in 0..count {
        let start = r.offset();
        let id = r.short_string()?;
        let values = r.f32_vec(dim)?;
        let id = ImageId::new(id).map_err(|e| r.error_at(start, e.to_string()))?;
        set.insert(id, values)
            .map_err(|e| r.error_at(start, e.to_string()))?;
    }
    r.expect_eof()?;
    Ok(set)
}

pub fn save_local_descriptors(set: &LocalDescriptorSet, path: &Path) -> Result<()> {
    let count: u32 = set
        .len()
        .try_into()
        .map_err(|_| Error::validation("local descriptor set too large for LOC1 (u32 count)"))?;
    let mut w = Writer::create(path)?;
    w.magic(LOC1_MAGIC)?;
    w.u32(count)?;
    w.u32(set.dim() as u32)?;
    for (id, flat) in set.iter() {
        w.short_string(id.as_str())?;
        let n_points: u32 = (flat.len() / set.dim())
            .try_into()
            .map_err(|_| Error::validation(format!("too many points for {id} (u32 count)")))?;
        w.u32(n_points)?;
        w.f32_slice(flat)?;
    }
    w.finish()
}

pub fn load_local_descriptors(path: &Path) -> Result<LocalDescriptorSet> {
    let mut r = Reader::open(path)?;
    r.magic(LOC1_MAGIC, "local descriptor store")?;
    let count = r.u32()?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(r.error_at(8, "descriptor dimension must be positive"));
    }
    let mut set = LocalDescriptorSet::new(dim);
    for _ in 0..count {
        let start = r.offset();
        let id = r.short_string()?;
        let n_points = r.u32()? as usize;
        let flat = r.f32_vec(n_points * dim)?;
        let id = ImageId::new(id).map_err(|e| r.error_at(start, e.to_string()))?;
        set.insert(id, flat)
            .map_err(|e| r.error_at(start, e.to_string()))?;
    }
    r.expect_eof()?;
    Ok(set)
}
