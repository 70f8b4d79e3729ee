//! Checkpoint files: a JSON metadata header plus a named tensor table.
//!
//! Layout (all integers little-endian):
//!   magic "IDVC" | u32 version=1 | u32 meta_len | meta (UTF-8 JSON)
//!   | u32 tensor_count | per tensor: u16 name_len | name | u32 rows
//!   | u32 cols | rows*cols f32 values
//!
//! Tensors are stored as f32; in-memory values are snapped to the f32 grid
//! after every update, so save/load round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{IdvidError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IDVC";
const VERSION: u32 = 1;

pub fn save_checkpoint<'a>(
    path: &Path,
    meta: &str,
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = meta.as_bytes();
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_bytes);
    let entries: Vec<_> = tensors.collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| IdvidError::io(path, e))?;
    f.write_all(&buf).map_err(|e| IdvidError::io(path, e))?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Split into a parameter store, leaving optimizer-state entries
    /// (names under "opt.") separate.
    pub fn into_parts(self) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut params = ParamStore::new();
        let mut opt = BTreeMap::new();
        for (name, t) in self.tensors {
            if name.starts_with("opt.") {
                opt.insert(name, t);
            } else {
                params.insert(&name, t);
            }
        }
        (params, opt)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| IdvidError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| IdvidError::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(IdvidError::CorruptFile(format!(
                "truncated checkpoint at offset {}",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(IdvidError::CorruptFile("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(IdvidError::CorruptFile(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|e| IdvidError::CorruptFile(format!("meta not UTF-8: {e}")))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| IdvidError::CorruptFile(format!("tensor name not UTF-8: {e}")))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rows.saturating_mul(cols) > (1 << 28) {
            return Err(IdvidError::CorruptFile(format!(
                "implausible tensor dims {rows}x{cols} for {name}"
            )));
        }
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            t.data_mut()[i] = v as f64;
        }
        if tensors.insert(name.clone(), t).is_some() {
            return Err(IdvidError::CorruptFile(format!(
                "duplicate tensor name {name}"
            )));
        }
    }
    if pos != bytes.len() {
        return Err(IdvidError::CorruptFile(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_params(path: &Path, meta: &str, params: &ParamStore) -> Result<()> {
    save_checkpoint(path, meta, params.iter())
}
