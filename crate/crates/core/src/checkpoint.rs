//! Versioned binary checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic          8 bytes   "SEQCLCKP"
//! format_version u32       1
//! config_len     u32       byte length of the JSON config that follows
//! config         config_len bytes of UTF-8 JSON
//! vocab_hash     u64
//! section_count  u32
//! per section:
//!   name_len u32, name (UTF-8)
//!   tensor_count u32
//!   per tensor:
//!     name_len u32, name (UTF-8)
//!     rows u32, cols u32
//!     rows·cols f64 values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEQCLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub vocab_hash: u64,
    pub sections: Vec<(String, ParamSet)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ParamSet> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_json)?;
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        put_u32(&mut out, self.sections.len())?;
        for (name, params) in &self.sections {
            put_str(&mut out, name)?;
            put_u32(&mut out, params.len())?;
            for (tname, t) in params.iter() {
                put_str(&mut out, tname)?;
                put_u32(&mut out, t.rows())?;
                put_u32(&mut out, t.cols())?;
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config_json = r.string("config")?;
        let vocab_hash = r.u64("vocab hash")?;
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string("section name")?;
            let n = r.u32("tensor count")?;
            let mut params = ParamSet::new();
            for _ in 0..n {
                let tname = r.string("tensor name")?;
                let rows = r.u32("rows")?;
                let cols = r.u32("cols")?;
                let len = rows
                    .checked_mul(cols)
                    .and_then(|n| n.checked_mul(8))
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {tname} is too large")))?;
                let raw = r.take(len, &tname)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                if params.position(&tname).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {tname}")));
                }
                params.push(tname, Tensor::from_vec(rows, cols, data));
            }
            sections.push((name, params));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last section",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_json,
            vocab_hash,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
