//! Model persistence: a JSON manifest next to a raw little-endian blob.
//!
//! Blob layout (`*.bin`):
//!
//! ```text
//! b"PKW1"
//! u64 entry count
//! per entry: u32 name length, name (UTF-8), u64 byte offset, u64 element count
//! data region
//! ```
//!
//! Offsets are relative to the start of the data region. Parameter and
//! buffer entries are packed float32; mask entries (role `mask`) are packed
//! bits, least-significant bit first, one bit per weight. Every entry starts
//! on a 4-byte boundary. The manifest repeats each entry's dims, role and
//! CRC-32 so loads can be verified.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphDef, ModelGraph, Param};
use crate::mask::{Mask, MaskSet};

pub const BLOB_MAGIC: &[u8; 4] = b"PKW1";
pub const MANIFEST_FORMAT: &str = "segprune-model";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub count: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub graph: GraphDef,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(blob)
}

fn pad4(buf: &mut Vec<u8>) {
    while buf.len() % 4 != 0 {
        buf.push(0);
    }
}

fn pack_bits(keep: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; keep.len().div_ceil(8)];
    for (i, k) in keep.iter().enumerate() {
        if *k {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    save_with_masks(graph, None, path)
}

/// Writes `path` (manifest) and a sibling `.bin` blob.
pub fn save_with_masks(graph: &ModelGraph, masks: Option<&MaskSet>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(m) = masks {
        m.validate_for(graph)?;
    }
    let mut payloads: Vec<(String, TensorRole, Vec<usize>, u64, Vec<u8>)> = Vec::new();
    for (role, map) in [(TensorRole::Param, graph.params()), (TensorRole::Buffer, graph.buffers())] {
        for (name, p) in map {
            let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            payloads.push((name.clone(), role, p.dims.clone(), p.data.len() as u64, bytes));
        }
    }
    if let Some(m) = masks {
        for (name, mask) in m.iter() {
            payloads.push((name.clone(), TensorRole::Mask, mask.dims.clone(), mask.len() as u64, pack_bits(&mask.keep)));
        }
    }

    let mut header = Vec::new();
    header.extend_from_slice(BLOB_MAGIC);
    header.extend_from_slice(&(payloads.len() as u64).to_le_bytes());
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(payloads.len());
    for (name, role, dims, count, bytes) in payloads {
        let offset = data.len() as u64;
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&count.to_le_bytes());
        entries.push(TensorEntry {
            name,
            role,
            dims,
            offset,
            count,
            crc32: crc32fast::hash(&bytes),
        });
        data.extend_from_slice(&bytes);
        pad4(&mut data);
    }
    header.extend_from_slice(&data);

    let blob_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("model")
    );
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        blob: blob_name.clone(),
        graph: graph.arch().clone(),
        tensors: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bp = blob_path(path, &blob_name);
    fs::write(&bp, header).map_err(|e| Error::io(&bp, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    Ok(load_with_masks(path)?.0)
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedManifest {
        location: path.display().to_string(),
        detail: detail.into(),
    }
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        detail: e.to_string(),
    })
}

/// Reads an architecture-only manifest (nodes, input, output).
pub fn load_arch(path: impl AsRef<Path>) -> Result<GraphDef> {
    parse_json(path.as_ref())
}

pub fn save_arch(arch: &GraphDef, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(arch)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(malformed(self.path, format!("blob truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads a model and, when present, its masks.
pub fn load_with_masks(path: impl AsRef<Path>) -> Result<(ModelGraph, Option<MaskSet>)> {
    let path = path.as_ref();
    let manifest: Manifest = parse_json(path)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(malformed(
            path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let bp = blob_path(path, &manifest.blob);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: &bp };
    if cur.take(4)? != BLOB_MAGIC {
        return Err(malformed(&bp, "bad magic, expected PKW1"));
    }
    let count = cur.u64()? as usize;
    if count != manifest.tensors.len() {
        return Err(malformed(
            &bp,
            format!("blob has {count} entries, manifest lists {}", manifest.tensors.len()),
        ));
    }
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| malformed(&bp, "entry name is not UTF-8"))?;
        let offset = cur.u64()?;
        let n = cur.u64()?;
        header.push((name, offset, n));
    }
    let data = &bytes[cur.pos..];

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for (entry, (name, offset, n)) in manifest.tensors.iter().zip(header) {
        if entry.name != name || entry.offset != offset || entry.count != n {
            return Err(malformed(
                path,
                format!("tensor `{}` disagrees with blob header entry `{name}`", entry.name),
            ));
        }
        if entry.dims.iter().product::<usize>() as u64 != n {
            return Err(malformed(path, format!("tensor `{name}` dims do not match its count")));
        }
        let n = n as usize;
        let width = match entry.role {
            TensorRole::Mask => n.div_ceil(8),
            _ => n * 4,
        };
        let start = offset as usize;
        let raw = data
            .get(start..start + width)
            .ok_or_else(|| malformed(&bp, format!("tensor `{name}` runs past the end of the blob")))?;
        if crc32fast::hash(raw) != entry.crc32 {
            return Err(Error::ChecksumMismatch { name });
        }
        match entry.role {
            TensorRole::Mask => {
                masks.insert(name, Mask { dims: entry.dims.clone(), keep: unpack_bits(raw, n) });
            }
            role => {
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let p = Param { dims: entry.dims.clone(), data: values };
                if role == TensorRole::Param {
                    params.insert(name, p);
                } else {
                    buffers.insert(name, p);
                }
            }
        }
    }
    let graph = ModelGraph::new(manifest.graph, params, buffers)?;
    let masks = if masks.is_empty() {
        None
    } else {
        let m = MaskSet::new(masks);
        m.validate_for(&graph)?;
        Some(m)
    };
    Ok((graph, masks))
}
