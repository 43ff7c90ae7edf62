//! Versioned binary container for trained models.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` payload length, 32-byte SHA-256 of the payload, then the payload
//! (UTF-8 JSON). A JSON sidecar next to the container repeats the version
//! and digest alongside caller-supplied metadata.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TMRWMDL\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub payload_sha256: String,
    pub payload_bytes: u64,
    pub metadata: serde_json::Value,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Serialize>(payload: &T) -> Result<(Vec<u8>, String)> {
    let body = serde_json::to_vec(payload)?;
    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&body);
    Ok((out, hex(&digest)))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    decode_with_digest(bytes).map(|(v, _)| v)
}

/// Decodes and also returns the hex digest recorded in the header.
pub fn decode_with_digest<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, String)> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Container("not a model container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Container(format!("unsupported container version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(Error::Container(format!(
            "payload is {} bytes, header says {len}",
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != &bytes[20..52] {
        return Err(Error::Container("payload checksum mismatch".into()));
    }
    Ok((serde_json::from_slice(body)?, hex(&bytes[20..52])))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes the container and its sidecar; returns the payload digest.
pub fn write<T: Serialize>(path: &Path, payload: &T, metadata: serde_json::Value) -> Result<String> {
    let (bytes, digest) = encode(payload)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        payload_sha256: digest.clone(),
        payload_bytes: (bytes.len() - HEADER_LEN) as u64,
        metadata,
    };
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(digest)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_with_digest(path).map(|(v, _)| v)
}

pub fn read_with_digest<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_with_digest(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let value = vec![1u32, 2, 3];
        let (mut bytes, digest) = encode(&value).unwrap();
        assert_eq!(digest.len(), 64);
        assert_eq!(decode::<Vec<u32>>(&bytes).unwrap(), value);
        let last = bytes.len() - 2;
        bytes[last] ^= 1;
        assert!(matches!(decode::<Vec<u32>>(&bytes), Err(Error::Container(_))));
        assert!(decode::<Vec<u32>>(b"short").is_err());
    }

    #[test]
    fn sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let digest = write(&path, &"x", serde_json::json!({"k": 1})).unwrap();
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.payload_sha256, digest);
        assert_eq!(read::<String>(&path).unwrap(), "x");
    }
}
