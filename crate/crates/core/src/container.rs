//! Binary container shared by checkpoints and slider files.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, UTF-8 JSON
//! header, then each blob's `f32` values in little-endian order, row-major,
//! in header order. The header carries `format_version`, the blob table
//! (`id`, `rows`, `cols`, `sha256` of the raw bytes) and a free-form `meta`
//! object.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header<M> {
    format_version: u32,
    meta: M,
    blobs: Vec<BlobEntry>,
}

/// A decoded container: metadata, blob table and blob values.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<M> {
    pub meta: M,
    pub entries: Vec<BlobEntry>,
    pub blobs: Vec<Array2<f32>>,
}

fn blob_bytes(a: &Array2<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode<M: Serialize>(
    magic: &[u8; 8],
    version: u32,
    meta: &M,
    blobs: &[(&str, &Array2<f32>)],
) -> Result<Vec<u8>> {
    let payloads: Vec<Vec<u8>> = blobs.iter().map(|(_, a)| blob_bytes(a)).collect();
    let header = Header {
        format_version: version,
        meta,
        blobs: blobs
            .iter()
            .zip(&payloads)
            .map(|((id, a), bytes)| BlobEntry {
                id: id.to_string(),
                rows: a.nrows(),
                cols: a.ncols(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payloads.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in payloads {
        out.extend_from_slice(&p);
    }
    Ok(out)
}

/// Parses and verifies a container. Errors are distinct per failure:
/// [`Error::Magic`], [`Error::Version`], [`Error::Checksum`], and
/// [`Error::Format`] for structural damage.
pub fn decode<M: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<Container<M>> {
    let expected_magic = || Error::Magic(String::from_utf8_lossy(magic).trim_end_matches('\0').to_string());
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != magic {
            expected_magic()
        } else {
            Error::Format("file shorter than its fixed header".into())
        });
    }
    if &bytes[..8] != magic {
        return Err(expected_magic());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&n| n <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("header lacks format_version".into()))?;
    if found != u64::from(version) {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: version,
        });
    }
    let header: Header<M> =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("header fields: {e}")))?;

    let mut data = &body[header_len..];
    let mut blobs = Vec::with_capacity(header.blobs.len());
    for entry in &header.blobs {
        let n = entry
            .rows
            .checked_mul(entry.cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("blob `{}` dimensions overflow", entry.id)))?;
        if data.len() < n {
            return Err(Error::Format(format!("blob `{}` truncated", entry.id)));
        }
        let (chunk, rest) = data.split_at(n);
        data = rest;
        if sha256_hex(chunk) != entry.sha256 {
            return Err(Error::Checksum(entry.id.clone()));
        }
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blobs.push(
            Array2::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    if !data.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", data.len())));
    }
    Ok(Container {
        meta: header.meta,
        entries: header.blobs,
        blobs,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MAGIC: &[u8; 8] = b"TESTBLOB";

    fn sample() -> Vec<u8> {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| i as f32 - 0.25 * j as f32);
        let b = Array2::from_elem((1, 4), f32::MIN_POSITIVE);
        encode(MAGIC, 1, &json!({"name": "x"}), &[("a", &a), ("b", &b)]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let c: Container<serde_json::Value> = decode(&bytes, MAGIC, 1).unwrap();
        assert_eq!(c.meta["name"], "x");
        assert_eq!(c.entries[0].id, "a");
        assert_eq!(c.blobs[0][[2, 1]].to_bits(), (2.0f32 - 0.25).to_bits());
        assert_eq!(c.blobs[1][[0, 3]].to_bits(), f32::MIN_POSITIVE.to_bits());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample();
        assert!(matches!(
            decode::<serde_json::Value>(&bytes, b"OTHERMAG", 1),
            Err(Error::Magic(_))
        ));
        assert!(matches!(
            decode::<serde_json::Value>(&bytes, MAGIC, 2),
            Err(Error::Version { found: 1, expected: 2 })
        ));
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode::<serde_json::Value>(&bad, MAGIC, 1), Err(Error::Checksum(id)) if id == "b"));
        assert!(matches!(
            decode::<serde_json::Value>(&bytes[..bytes.len() - 1], MAGIC, 1),
            Err(Error::Format(_))
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode::<serde_json::Value>(&extra, MAGIC, 1), Err(Error::Format(_))));
        assert!(matches!(decode::<serde_json::Value>(b"TEST", MAGIC, 1), Err(Error::Format(_))));
    }
}
