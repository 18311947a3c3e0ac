//! Binary container shared by checkpoints, steering packs and activation
//! caches.
//!
//! Layout (all integers u64 little-endian):
//! `magic[8] | header_len | header (UTF-8) | n_tensors |`
//! then per tensor `name_len | name | rank | dims[rank] | f64 LE data`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CasalError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub header: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(_, m)| m.as_slice().len() * 8 + 64).sum();
        let mut out = Vec::with_capacity(32 + self.header.len() + payload);
        out.extend_from_slice(&self.magic);
        put_u64(&mut out, self.header.len() as u64);
        out.extend_from_slice(self.header.as_bytes());
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, m) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, 2);
            put_u64(&mut out, m.rows() as u64);
            put_u64(&mut out, m.cols() as u64);
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let got = r.take(8)?;
        if got != magic {
            return Err(CasalError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let header_len = r.len()?;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| CasalError::Format("header is not UTF-8".into()))?;
        let n = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CasalError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.len()?;
            let (rows, cols) = match rank {
                1 => (1, r.len()?),
                2 => (r.len()?, r.len()?),
                _ => return Err(CasalError::Format(format!("{name}: unsupported rank {rank}"))),
            };
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| CasalError::Format(format!("{name}: dims overflow")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| CasalError::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(CasalError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            magic: *magic,
            header,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CasalError::Format(format!("missing tensor {name}")))
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CasalError::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CasalError::Format("length overflows usize".into()))
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Child seed for a labelled sub-stream of a run, so that independent
/// stages never share random draws.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
