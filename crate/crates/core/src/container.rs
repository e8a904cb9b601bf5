//! Shared on-disk layout: one line of JSON header, a newline, then a raw
//! little-endian `f32` blob whose byte length the header records.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(header: &H, blob: &[f32]) -> Vec<u8> {
    // serde_json escapes control characters, so the compact form never holds a raw newline
    let mut out = serde_json::to_vec(header).expect("header types always serialize");
    out.push(b'\n');
    out.reserve(blob.len() * 4);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits `bytes` into the parsed header and the remaining blob bytes.
pub(crate) fn split<'a, H: DeserializeOwned>(
    format: &'static str,
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::Truncated {
            format,
            expected: bytes.len() + 1,
            found: bytes.len(),
        })?;
    let header = serde_json::from_slice(&bytes[..nl])
        .map_err(|source| Error::MalformedHeader { format, source })?;
    Ok((header, &bytes[nl + 1..]))
}

pub(crate) fn decode_f32(format: &'static str, blob: &[u8], expected_len: usize) -> Result<Vec<f32>> {
    let expected = expected_len * 4;
    if blob.len() != expected {
        return Err(Error::Truncated {
            format,
            expected,
            found: blob.len(),
        });
    }
    Ok(blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn check_version(format: &'static str, found: u32, expected: u32) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::VersionMismatch {
            format,
            found,
            expected,
        })
    }
}

pub(crate) fn check_kind(format: &'static str, found: &str) -> Result<()> {
    if found == format {
        Ok(())
    } else {
        Err(Error::InconsistentHeader {
            format,
            detail: format!("file declares format {found:?}"),
        })
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temp file and rename so a failed write leaves nothing behind.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
