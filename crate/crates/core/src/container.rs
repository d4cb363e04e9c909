//! Container files: a key=value text manifest followed by named XTEN blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   file kind, e.g. "XNET" or "XDET"
//! version    u8        0x01
//! manifest   u32 len + UTF-8 text, one `key=value` per line
//! count      u32       number of blobs
//! blob       u16 name len + UTF-8 name, u64 len + XTEN tensor   (repeated)
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VERSION: u8 = 0x01;

/// Ordered key=value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format(0, format!("manifest is missing `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(0, format!("manifest key `{key}` has invalid value `{raw}`")))
    }

    /// Stores floats as comma-separated exact text.
    pub fn set_floats(&mut self, key: impl Into<String>, values: &[f64]) {
        let text: Vec<String> = values.iter().map(|&v| fmt_exact(v)).collect();
        self.set(key, text.join(","));
    }

    pub fn parse_floats(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        let values = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::format(0, format!("manifest key `{key}` has invalid float `{v}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        if values.len() != len {
            return Err(Error::format(0, format!("manifest key `{key}` has {} values, expected {len}", values.len())));
        }
        Ok(values)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Self::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let (k, v) = trimmed
                    .split_once('=')
                    .ok_or_else(|| Error::format(offset, format!("expected key=value, got `{trimmed}`")))?;
                m.set(k.trim(), v.trim());
            }
            offset += line.len();
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub blobs: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(manifest: Manifest) -> Self {
        Self { manifest, blobs: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.blobs.push((name.into(), t));
    }

    pub fn blob(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(0, format!("missing blob `{name}`")))
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.push(VERSION);
        let text = self.manifest.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let b = t.to_xten_bytes();
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != magic {
            return Err(Error::format(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let start = r.at;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::format(start + e.valid_up_to(), "manifest is not UTF-8"))?;
        let manifest = Manifest::from_text(text).map_err(|e| match e {
            Error::Format { offset, detail } => Error::format(start + offset, detail),
            other => other,
        })?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.at;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "blob name is not UTF-8"))?
                .to_owned();
            let blob_len = r.u64()? as usize;
            let at = r.at;
            let (t, used) = Tensor::from_xten_bytes(r.take(blob_len)?, at)?;
            if used != blob_len {
                return Err(Error::format(at + used, format!("blob `{name}` has trailing bytes")));
            }
            blobs.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(Error::format(r.at, "trailing bytes after last blob"));
        }
        Ok(Self { manifest, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.bytes.len(), format!("truncated: need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Formats a float so that parsing it back gives the identical value.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:?}")
}
