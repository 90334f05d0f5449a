//! Single-file array container: magic, version, JSON manifest, then raw
//! little-endian blobs.
//!
//! ```text
//! b"QSNETBIN" | u32 version | u64 manifest length | manifest JSON | data
//! ```
//!
//! The manifest lists every array's name, dtype (`f32` or `i32`), shape and
//! byte offset into the data region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QSNETBIN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Tensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Array {
    fn dtype(&self) -> &'static str {
        match self {
            Array::F32(_) => "f32",
            Array::I32 { .. } => "i32",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Array::F32(t) => t.shape(),
            Array::I32 { shape, .. } => shape,
        }
    }

    pub fn as_f32(&self) -> Option<&Tensor> {
        match self {
            Array::F32(t) => Some(t),
            Array::I32 { .. } => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            Array::I32 { data, .. } => Some(data),
            Array::F32(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn put_f32(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), Array::F32(t));
    }

    pub fn put_i32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) {
        self.arrays.insert(name.into(), Array::I32 { shape, data });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, a) in &self.arrays {
            let offset = data.len();
            match a {
                Array::F32(t) => t.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
                Array::I32 { data: d, .. } => d.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(Entry {
                name: name.clone(),
                dtype: a.dtype().into(),
                shape: a.shape().to_vec(),
                offset,
                bytes: data.len() - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a qsnet container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        let data = &bytes[20 + mlen..];
        let mut arrays = BTreeMap::new();
        for e in manifest.arrays {
            let n: usize = e.shape.iter().product();
            if e.bytes != 4 * n {
                return Err(bad(format!("array '{}' has {} bytes for shape {:?}", e.name, e.bytes, e.shape)));
            }
            let raw = data
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| bad(format!("array '{}' runs past the end of the file", e.name)))?;
            let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
            let array = match e.dtype.as_str() {
                "f32" => Array::F32(Tensor::new(e.shape, words.map(f32::from_le_bytes).collect())?),
                "i32" => Array::I32 {
                    shape: e.shape,
                    data: words.map(i32::from_le_bytes).collect(),
                },
                other => return Err(bad(format!("unknown dtype '{other}'"))),
            };
            arrays.insert(e.name, array);
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn read_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::read(path)?;
        if c.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} file, found {}", c.kind),
            });
        }
        Ok(c)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .and_then(Array::as_f32)
            .ok_or_else(|| Error::config(format!("missing f32 array '{name}'")))
    }

    pub fn i32(&self, name: &str) -> Result<&[i32]> {
        self.arrays
            .get(name)
            .and_then(Array::as_i32)
            .ok_or_else(|| Error::config(format!("missing i32 array '{name}'")))
    }
}
