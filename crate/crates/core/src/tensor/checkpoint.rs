//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `EMPWCKPT`, `u32` version, `u32` entry
//! count, then per entry a `u32` name length, the UTF-8 name, `u32` rows,
//! `u32` cols and `rows * cols` IEEE-754 `f64` values.

use std::path::Path;

use super::param::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMPWCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Adds every block of `store` with names prefixed by `role/`.
    pub fn push_store(&mut self, role: &str, store: &ParamStore) {
        for b in &store.blocks {
            self.entries.push(NamedTensor {
                name: format!("{role}/{}", b.name),
                rows: b.rows,
                cols: b.cols,
                values: b.values.clone(),
            });
        }
    }

    /// Restores the blocks of `store` saved under `role`.
    pub fn restore_store(&self, role: &str, store: &mut ParamStore) -> Result<()> {
        for b in &mut store.blocks {
            let name = format!("{role}/{}", b.name);
            let e = self
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            if (e.rows, e.cols) != (b.rows, b.cols) {
                return Err(Error::Checkpoint(format!(
                    "`{name}` is {}x{}, expected {}x{}",
                    e.rows, e.cols, b.rows, b.cols
                )));
            }
            b.values.clone_from(&e.values);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.cols as u32).to_le_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let values = (0..rows * cols)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push(NamedTensor { name, rows, cols, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
