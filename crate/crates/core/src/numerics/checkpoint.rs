//! Checkpoint container.
//!
//! A checkpoint is a directory holding two files:
//!
//! `tensors.bin`, all integers and floats little-endian:
//!
//! ```text
//! magic    b"DKCT"
//! version  u32
//! count    u32
//! count x {
//!     name_len u32, name [u8; name_len] (UTF-8)
//!     rank     u32, dims [u64; rank]
//!     data     [f64; product(dims)]
//! }
//! ```
//!
//! `manifest.json`: [`Manifest`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DKCT";
pub const FORMAT_VERSION: u32 = 1;
pub const TENSORS_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(kind: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: kind.into(),
            seed,
            config_hash: config_hash.into(),
            hashes: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_hash(mut self, key: &str, value: impl Into<String>) -> Self {
        self.hashes.insert(key.to_string(), value.into());
        self
    }

    pub fn with_meta(mut self, key: &str, value: serde_json::Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    /// Fails unless `self.hashes[key] == expected`.
    pub fn require_hash(&self, key: &str, expected: &str) -> Result<()> {
        match self.hashes.get(key) {
            Some(found) if found == expected => Ok(()),
            found => Err(Error::ManifestMismatch {
                field: key.to_string(),
                expected: expected.to_string(),
                found: found.cloned().unwrap_or_else(|| "<absent>".into()),
            }),
        }
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::ManifestMismatch {
                field: "kind".into(),
                expected: kind.into(),
                found: self.kind.clone(),
            })
        }
    }
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_tensors(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes"));
    }
    Ok(out)
}

pub fn save(dir: &Path, manifest: &Manifest, entries: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, encode_tensors(entries)).map_err(|e| Error::io(&tpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(ckpt_err(
            &mpath,
            format!(
                "manifest version {}, expected {FORMAT_VERSION}",
                manifest.version
            ),
        ));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest = load_manifest(dir)?;
    let tpath = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    Ok((manifest, decode_tensors(&bytes, &tpath)?))
}

pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect()
}

/// Overwrites every parameter of `store` from `entries`; names and shapes
/// must match exactly.
pub fn restore_store(store: &mut ParamStore, entries: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    if entries.len() != store.len() {
        return Err(ckpt_err(
            path,
            format!("{} tensors, model expects {}", entries.len(), store.len()),
        ));
    }
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| ckpt_err(path, format!("unexpected tensor `{name}`")))?;
        store
            .set(id, t)
            .map_err(|e| ckpt_err(path, format!("tensor `{name}`: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let entries = vec![
            ("a".to_string(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 0.1]).unwrap()),
            ("b.c".to_string(), Tensor::row(vec![f64::MIN_POSITIVE, 7.0])),
        ];
        let bytes = encode_tensors(&entries);
        let p = Path::new("mem");
        assert_eq!(decode_tensors(&bytes, p).unwrap(), entries);
        assert!(decode_tensors(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_tensors(&bad, p).is_err());
    }

    #[test]
    fn manifest_hash_check() {
        let m = Manifest::new("transe", 7, "abc").with_hash("kg", "123");
        assert!(m.require_hash("kg", "123").is_ok());
        assert!(matches!(
            m.require_hash("kg", "999"),
            Err(Error::ManifestMismatch { .. })
        ));
        assert!(m.require_hash("vocab", "1").is_err());
    }
}
