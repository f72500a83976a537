//! Framed binary container shared by checkpoints and sparse artifacts.
//!
//! ```text
//! offset  size  field
//! 0       8     magic
//! 8       4     format version, u32 LE
//! 12      8     header length H, u64 LE
//! 20      H     header, UTF-8 JSON
//! 20+H    8     payload length P, u64 LE
//! 28+H    P     payload (little-endian numbers, layout given by the header)
//! 28+H+P  4     CRC-32 (IEEE) of bytes [0, 28+H+P), u32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const FIXED: usize = 8 + 4 + 8 + 8 + 4;

pub fn encode<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(FIXED + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a half-written container.
pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> Result<()> {
    let bytes = encode(magic, version, header, payload)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Checks magic, checksum and version, in that order, then parses the
/// header. Returns the header and the payload bytes.
pub fn decode<H: DeserializeOwned>(path: &Path, bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<(H, Vec<u8>)> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::format(
            path,
            format!("not a {} file", String::from_utf8_lossy(magic).trim_end_matches('\0')),
        ));
    }
    if bytes.len() < FIXED {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let found = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e + 8 <= body.len())
        .ok_or_else(|| Error::format(path, "header length exceeds file"))?;
    let header: H = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    let payload_len = u64::from_le_bytes(body[header_end..header_end + 8].try_into().expect("8 bytes")) as usize;
    let payload = &body[header_end + 8..];
    if payload.len() != payload_len {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header promises {payload_len}", payload.len()),
        ));
    }
    Ok((header, payload.to_vec()))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path)?;
    decode(path, &bytes, magic, version)
}

#[derive(Debug, Default)]
pub struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    pub fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, values: &[u32]) {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct PayloadReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "payload shorter than the header describes"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Errors unless every byte was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing payload bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
