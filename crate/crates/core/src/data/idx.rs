//! IDX container (the MNIST file format): big-endian header, `u8` payload.
//! Gzipped files are detected by their magic bytes and decompressed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Result, SadaError};

const UNSIGNED_BYTE: u8 = 0x08;

/// N-dimensional array of bytes as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(SadaError::shape(
                format!("{expected} bytes for dims {dims:?}"),
                format!("{} bytes", data.len()),
            ));
        }
        Ok(IdxArray { dims, data })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, message: String| SadaError::Parse { offset: offset as u64, message };
        if bytes.len() < 4 {
            return Err(err(bytes.len(), format!("file is {} bytes, too short for the 4-byte magic", bytes.len())));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(err(0, format!("bad magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1])));
        }
        if bytes[2] != UNSIGNED_BYTE {
            return Err(err(
                2,
                format!("unsupported element type 0x{:02x}; only unsigned bytes are supported", bytes[2]),
            ));
        }
        let rank = bytes[3] as usize;
        if rank == 0 {
            return Err(err(3, "zero-dimensional array".into()));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(err(bytes.len(), format!("truncated header: need {header} bytes")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
            .collect();
        let len: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() < len {
            return Err(err(
                bytes.len(),
                format!("truncated payload: dims {dims:?} need {len} bytes, found {}", payload.len()),
            ));
        }
        if payload.len() > len {
            return Err(err(header + len, format!("{} trailing bytes after payload", payload.len() - len)));
        }
        Ok(IdxArray { dims, data: payload.to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&[0, 0, UNSIGNED_BYTE, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(|e| SadaError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| SadaError::io(path, e))?;
        raw = out;
    }
    IdxArray::parse(&raw)
}

/// Writes an uncompressed IDX file.
pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    File::create(path).and_then(|mut f| f.write_all(&array.to_bytes())).map_err(|e| SadaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(IdxArray::parse(&[]), Err(SadaError::Parse { offset: 0, .. })));
    }

    #[test]
    fn bad_magic_reports_offset() {
        let err = IdxArray::parse(&[1, 0, 8, 1, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, SadaError::Parse { offset: 0, .. }));
        let err = IdxArray::parse(&[0, 0, 0x0d, 1, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, SadaError::Parse { offset: 2, .. }));
    }

    #[test]
    fn truncation_is_detected() {
        let a = IdxArray::new(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = a.to_bytes();
        let err = IdxArray::parse(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, SadaError::Parse { offset: 17, .. }), "{err}");
        assert!(IdxArray::parse(&bytes[..6]).is_err());
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.idx");
        let a = IdxArray::new(vec![3, 2, 2], (0..12).collect()).unwrap();
        write_idx(&path, &a).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, a.to_bytes());
        let b = read_idx(&path).unwrap();
        assert_eq!(a, b);
        write_idx(&path, &b).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}
