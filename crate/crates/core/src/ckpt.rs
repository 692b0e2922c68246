//! Versioned binary container for parameters.
//!
//! ```text
//! "AGMCKPT\0"  u32 version  u32 header_len  header (JSON, UTF-8)
//! u32 block_count
//! per block: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use agm_autograd::{ParamStore, Tensor};

use crate::error::{AgmError, Result};

const MAGIC: &[u8; 8] = b"AGMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: serde_json::Value) -> Self {
        Container {
            header,
            blocks: Vec::new(),
        }
    }

    /// Appends every parameter and buffer of `store`, named `prefix + name`.
    pub fn push_store(&mut self, store: &ParamStore, prefix: &str) {
        for id in store.ids() {
            self.blocks.push((format!("{prefix}{}", store.name(id)), store.get(id).clone()));
        }
    }

    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every entry of `store` from blocks named `prefix + name`.
    pub fn fill_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self
                .block(&name)
                .ok_or_else(|| AgmError::Checkpoint(format!("missing parameter block {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(AgmError::Checkpoint(format!(
                    "block {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(AgmError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(AgmError::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header = serde_json::from_slice(header_bytes)
            .map_err(|e| AgmError::Checkpoint(format!("header is not valid JSON: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| AgmError::Checkpoint("block name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(&mut r, len.checked_mul(8).ok_or_else(truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blocks.push((name, Tensor::new(&shape, data)));
        }
        if !r.is_empty() {
            return Err(AgmError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Container { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| AgmError::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| AgmError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| AgmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(AgmError::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| AgmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> AgmError {
    AgmError::Checkpoint("truncated checkpoint".into())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(truncated());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
