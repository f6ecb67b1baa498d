//! Two-dimensional real grids, their CSV persistence, and content hashing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SadaError};

/// Row-major `height x width` grid of reals in the centered frequency layout
/// (DC at `(height / 2, width / 2)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SadaError::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", values.len()),
            ));
        }
        Ok(Grid { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid { height, width, values: vec![value; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Fingerprinter::new("grid");
        hasher.usize(self.height).usize(self.width).f64s(&self.values);
        hasher.finish()
    }

    /// Writes one CSV line per row. Values use Rust's shortest round-trip
    /// float formatting, so a reload reproduces the grid bit-exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SadaError::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        for row in self.values.chunks(self.width) {
            writer.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        writer.flush().map_err(|e| SadaError::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SadaError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(BufReader::new(file));
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for record in reader.records() {
            let record = record?;
            match width {
                None => width = Some(record.len()),
                Some(w) if w != record.len() => {
                    return Err(SadaError::InvalidInput(format!(
                        "{}: row {height} has {} columns, expected {w}",
                        path.display(),
                        record.len()
                    )))
                }
                _ => {}
            }
            for field in record.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| SadaError::InvalidInput(format!("{}: bad number {field:?}", path.display())))?;
                values.push(v);
            }
            height += 1;
        }
        let width = width.ok_or_else(|| SadaError::InvalidInput(format!("{}: empty grid file", path.display())))?;
        Grid::new(height, width, values)
    }
}

/// SHA-256 over a typed byte stream; fingerprints are the first 16 bytes in hex.
pub struct Fingerprinter(Sha256);

impl Fingerprinter {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0u8]);
        Fingerprinter(h)
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.0.update((v as u64).to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.0.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn finish(&mut self) -> String {
        let digest = std::mem::take(&mut self.0).finalize();
        hex::encode(&digest[..16])
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| SadaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| SadaError::io(path, e))?;
    w.flush().map_err(|e| SadaError::io(path, e))?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| SadaError::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
