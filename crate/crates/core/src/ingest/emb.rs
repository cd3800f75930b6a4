//! EMB1 embedding matrices.
//!
//! Layout (little-endian, 32-byte header):
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `EMB1`                |
//! | 4      | 4    | u32 version = 1             |
//! | 8      | 8    | u64 rows                    |
//! | 16     | 8    | u64 cols                    |
//! | 24     | 1    | u8 dtype (0 = f32, 1 = f64) |
//! | 25     | 7    | zero padding                |
//! | 32     | ..   | row-major payload           |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use super::IngestError;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;
pub const EMB_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, IngestError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(IngestError::BadDtype(other)),
        }
    }
}

/// Pooled per-sample feature vectors, one row per sample.
///
/// Values are held as `f64` regardless of the stored dtype; `dtype` records
/// the on-disk precision used by [`write_embedding_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    dtype: Dtype,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>, dtype: Dtype) -> Result<Self, IngestError> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(IngestError::DimensionZero { rows, cols });
        }
        let representable = |v: f64| v.is_finite() && (dtype == Dtype::F64 || v.abs() <= f32::MAX as f64);
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !representable(**v)) {
            return Err(IngestError::NonFiniteEntry { row, col });
        }
        Ok(Self { data, dtype })
    }

    pub fn from_rows(rows: &[Vec<f64>], dtype: Dtype) -> Result<Self, IngestError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(IngestError::RaggedRows);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, d), flat).map_err(|_| IngestError::DimensionZero { rows: n, cols: d })?;
        Self::new(data, dtype)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

pub fn read_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| IngestError::io(path, e))?;
    decode_embedding_matrix(&bytes)
}

pub fn decode_embedding_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix, IngestError> {
    if bytes.len() < 4 || &bytes[..4] != EMB_MAGIC {
        return Err(IngestError::BadMagic { expected: "EMB1" });
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(IngestError::TruncatedPayload {
            expected: EMB_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMB_VERSION {
        return Err(IngestError::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let dtype = Dtype::from_code(bytes[24])?;
    if rows == 0 || cols == 0 {
        return Err(IngestError::DimensionZero { rows, cols });
    }
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or(IngestError::DimensionZero { rows, cols })?;
    let expected = EMB_HEADER_LEN + payload_len;
    if bytes.len() != expected {
        return Err(IngestError::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[EMB_HEADER_LEN..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(IngestError::NonFiniteEntry {
            row: pos / cols,
            col: pos % cols,
        });
    }
    let data = Array2::from_shape_vec((rows, cols), values).expect("length checked above");
    Ok(EmbeddingMatrix { data, dtype })
}

pub fn encode_embedding_matrix(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + m.rows() * m.cols() * m.dtype.width());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.push(m.dtype.code());
    out.extend_from_slice(&[0u8; 7]);
    for v in m.data.iter() {
        match m.dtype {
            Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn write_embedding_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    if m.rows() == 0 || m.cols() == 0 {
        return Err(IngestError::DimensionZero {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let file = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_embedding_matrix(m))
        .and_then(|_| w.flush())
        .map_err(|e| IngestError::io(path, e))
}
