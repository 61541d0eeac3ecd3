//! Single-file tensor container: an 8-byte magic, a little-endian `u64`
//! header length, a UTF-8 JSON header, then raw little-endian `f32` arrays
//! in the order the header declares them.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SBJCRAFT";
pub const FORMAT_VERSION: u32 = 1;

/// Headers larger than this are treated as corruption rather than allocated.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Model,
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: ContainerKind,
    pub metadata: Value,
    pub tensors: Vec<TensorInfo>,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: ContainerKind, metadata: Value, tensors: Vec<Tensor>) -> Result<Self> {
        let mut infos = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for t in &tensors {
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            infos.push(TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += numel;
        }
        Ok(Self {
            header: Header {
                format_version: FORMAT_VERSION,
                kind,
                metadata,
                tensors: infos,
                payload_bytes: (offset * 4) as u64,
            },
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.header.payload_bytes as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body_start) = parse_header(bytes)?;
        let payload = &bytes[body_start..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let start = info.offset * 4;
            let end = start + info.numel() * 4;
            let raw = payload.get(start..end).ok_or_else(|| {
                Error::Format(format!("tensor `{}` extends past the payload", info.name))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push(Tensor {
                name: info.name.clone(),
                shape: info.shape.clone(),
                data,
            });
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing container magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER_BYTES || 16 + len > bytes.len() as u64 {
        return Err(Error::Format(format!("header length {len} exceeds file")));
    }
    let end = 16 + len as usize;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, end))
}

/// Reads and validates only the header, checking the declared payload size
/// against the file length without reading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix)
        .map_err(|_| Error::Format("file shorter than the container prefix".into()))?;
    let len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
    if &prefix[..8] != MAGIC {
        return Err(Error::Format("missing container magic".into()));
    }
    if len > MAX_HEADER_BYTES || 16 + len > file_len {
        return Err(Error::Format(format!("header length {len} exceeds file")));
    }
    let mut buf = prefix.to_vec();
    buf.resize(16 + len as usize, 0);
    f.read_exact(&mut buf[16..])
        .map_err(|e| Error::Format(format!("short header: {e}")))?;
    let (header, _) = parse_header(&buf)?;
    if file_len - 16 - len != header.payload_bytes {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            file_len - 16 - len,
            header.payload_bytes
        )));
    }
    Ok(header)
}
