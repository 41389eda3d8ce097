// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat binary tensor container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic      8 bytes   e.g. "GPT2TNSR", "SAEPARAM"
//! version    u32       = 1
//! count      u32       number of tensor records
//! records    count ×   u16 name_len | name (UTF-8) | u8 rank |
//!                      rank × u64 dims | f32 payload, row-major
//! trailer    32 bytes  SHA-256 over the records section
//! ```
//!
//! The records section is everything between the 16-byte header and the
//! trailer. Files are written to a sibling temp file and renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 8] = *b"GPT2TNSR";
pub const SAE_MAGIC: [u8; 8] = *b"SAEPARAM";
pub const ACTIVATIONS_MAGIC: [u8; 8] = *b"ACTVDATA";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: u8 = 8;
const READ_CHUNK: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("file truncated in {context}")]
    Truncated { context: String },
    #[error("tensor record {index}: name is not valid UTF-8")]
    BadName { index: usize },
    #[error("tensor {name}: rank {rank} exceeds {MAX_RANK}")]
    Rank { name: String, rank: u8 },
    #[error("tensor {name}: shape {dims:?} is too large")]
    Overflow { name: String, dims: Vec<u64> },
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("payload checksum mismatch (file corrupted)")]
    Checksum,
    #[error("unexpected bytes after trailer")]
    TrailingBytes,
}

/// Write tensors in order. Names must be unique.
pub fn write_tensor_file(
    path: &Path,
    magic: [u8; 8],
    tensors: &[(&str, &Tensor)],
) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    };
    for (i, (name, _)) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|(n, _)| n == name) {
            return Err(FormatError::Duplicate(name.to_string()));
        }
    }
    let tmp = temp_sibling(path);
    let file = File::create(&tmp).map_err(io)?;
    let mut out = BufWriter::new(file);
    out.write_all(&magic).map_err(io)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut emit = |bytes: &[u8], out: &mut BufWriter<File>| -> std::io::Result<()> {
        hasher.update(bytes);
        out.write_all(bytes)
    };
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        emit(&(name_bytes.len() as u16).to_le_bytes(), &mut out).map_err(io)?;
        emit(name_bytes, &mut out).map_err(io)?;
        emit(&[tensor.rank() as u8], &mut out).map_err(io)?;
        for &d in tensor.shape() {
            emit(&(d as u64).to_le_bytes(), &mut out).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(READ_CHUNK);
        for chunk in tensor.data().chunks(READ_CHUNK / 4) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            emit(&buf, &mut out).map_err(io)?;
        }
    }
    let digest = hasher.finalize();
    out.write_all(&digest).map_err(io)?;
    out.flush().map_err(io)?;
    drop(out);
    fs::rename(&tmp, path).map_err(io)
}

/// Read every tensor, verifying magic, version and checksum.
pub fn read_tensor_file(path: &Path, magic: [u8; 8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let file = File::open(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_tensors(BufReader::new(file), magic)
}

/// Parse the container from any reader.
pub fn read_tensors<R: Read>(mut r: R, magic: [u8; 8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut header = [0u8; 16];
    read_exact(&mut r, &mut header, "header")?;
    if header[..8] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&header[..8]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::Version { found: version });
    }
    let count = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;

    let mut hasher = Sha256::new();
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        let ctx = format!("header of tensor record {index}");
        let mut len = [0u8; 2];
        read_hashed(&mut r, &mut hasher, &mut len, &ctx)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_hashed(&mut r, &mut hasher, &mut name, &ctx)?;
        let name = String::from_utf8(name).map_err(|_| FormatError::BadName { index })?;
        let ctx = format!("tensor {name}");
        let mut rank = [0u8; 1];
        read_hashed(&mut r, &mut hasher, &mut rank, &ctx)?;
        if rank[0] > MAX_RANK {
            return Err(FormatError::Rank { name, rank: rank[0] });
        }
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            read_hashed(&mut r, &mut hasher, &mut d, &ctx)?;
            dims.push(u64::from_le_bytes(d));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| FormatError::Overflow {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        let mut buf = vec![0u8; READ_CHUNK];
        let mut remaining = numel * 4;
        while remaining > 0 {
            let take = remaining.min(READ_CHUNK);
            read_hashed(&mut r, &mut hasher, &mut buf[..take], &ctx)?;
            data.extend(
                buf[..take]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
            remaining -= take;
        }
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::Duplicate(name));
        }
        let shape = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data).expect("length matches product of dims");
        tensors.push((name, tensor));
    }
    let mut trailer = [0u8; 32];
    read_exact(&mut r, &mut trailer, "checksum trailer")?;
    if hasher.finalize().as_slice() != trailer {
        return Err(FormatError::Checksum);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(tensors),
        Ok(_) => Err(FormatError::TrailingBytes),
        Err(source) => Err(FormatError::Io {
            path: "<reader>".into(),
            source,
        }),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], context: &str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::Truncated {
            context: context.to_string(),
        },
        _ => FormatError::Io {
            path: "<reader>".into(),
            source: e,
        },
    })
}

fn read_hashed<R: Read>(
    r: &mut R,
    hasher: &mut Sha256,
    buf: &mut [u8],
    context: &str,
) -> Result<(), FormatError> {
    read_exact(r, buf, context)?;
    hasher.update(&*buf);
    Ok(())
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
