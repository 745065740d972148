//! Binary per-stream feature files.
//!
//! Layout (little-endian): magic `D2FT`, `u32` version (1), `u32` snippets,
//! `u32` dim, then `snippets · dim` `f32` values, time-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"D2FT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// An `s × d` feature matrix exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub snippets: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(snippets: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != snippets * dim {
            return Err(Error::shape(
                "FeatureMatrix::new",
                format!("{snippets}x{dim} needs {} values, got {}", snippets * dim, values.len()),
            ));
        }
        Ok(Self {
            snippets,
            dim,
            values,
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.snippets,
            self.dim,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("length checked at construction")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.snippets as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a feature file image; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let (snippets, dim) = decode_header(bytes, path)?;
        let payload = &bytes[HEADER_LEN..];
        let expected = snippets * dim * 4;
        if payload.len() < expected {
            return Err(format_error(
                path,
                bytes.len() as u64,
                format!(
                    "truncated payload: header declares {snippets}x{dim} ({} floats) but only {} bytes follow",
                    snippets * dim,
                    payload.len()
                ),
            ));
        }
        if payload.len() > expected {
            return Err(format_error(
                path,
                (HEADER_LEN + expected) as u64,
                format!("{} trailing bytes after payload", payload.len() - expected),
            ));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            snippets,
            dim,
            values,
        })
    }
}

fn format_error(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_error(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(format_error(
            path,
            0,
            format!("bad magic {:?}, expected \"D2FT\"", &bytes[..4]),
        ));
    }
    let version = read_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(format_error(path, 4, format!("unsupported version {version}")));
    }
    let snippets = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if snippets == 0 {
        return Err(format_error(path, 8, "zero snippets"));
    }
    if dim == 0 {
        return Err(format_error(path, 12, "zero feature dimension"));
    }
    Ok((snippets, dim))
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    if features.snippets == 0 || features.dim == 0 {
        return Err(Error::shape("write_features", "empty feature matrix"));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&features.encode())
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::decode(&bytes, path)
}

/// Reads only the `(snippets, dim)` header.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; HEADER_LEN];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    decode_header(&head[..n], path)
}
