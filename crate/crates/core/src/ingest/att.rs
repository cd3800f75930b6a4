//! ATT1 attention records.
//!
//! Layout (little-endian): magic `ATT1`, u32 version = 1, u64 record count,
//! then per record: u32 n_image, u32 n_question, u32 sample_id_len, the
//! UTF-8 sample id, and (N+M)² f32 weights in row-major order.
//!
//! Token order inside each matrix is fixed: image tokens occupy `[0, N)`,
//! question tokens `[N, N+M)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IngestError;

pub const ATT_MAGIC: &[u8; 4] = b"ATT1";
pub const ATT_VERSION: u32 = 1;
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Head-averaged attention over N image and M question tokens for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    sample_id: String,
    n_image: usize,
    n_question: usize,
    attn: Vec<f64>,
}

impl AttentionRecord {
    /// Validates shape, non-negativity and row-stochasticity. Rows are
    /// never renormalized.
    pub fn new(
        sample_id: impl Into<String>,
        n_image: usize,
        n_question: usize,
        attn: Vec<f64>,
    ) -> Result<Self, IngestError> {
        let sample_id = sample_id.into();
        let n = n_image + n_question;
        if n_image == 0 || n_question == 0 {
            return Err(IngestError::EmptyModality { sample_id });
        }
        if attn.len() != n * n {
            return Err(IngestError::AttentionShape {
                sample_id,
                expected: n * n,
                found: attn.len(),
            });
        }
        for (row, chunk) in attn.chunks_exact(n).enumerate() {
            if let Some(col) = chunk.iter().position(|w| !w.is_finite() || *w < 0.0) {
                return Err(IngestError::InvalidWeight { sample_id, row, col });
            }
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(IngestError::RowNotStochastic { sample_id, row, sum });
            }
        }
        Ok(Self {
            sample_id,
            n_image,
            n_question,
            attn,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn n_question(&self) -> usize {
        self.n_question
    }

    pub fn n_tokens(&self) -> usize {
        self.n_image + self.n_question
    }

    /// Attention row of token `i` (length N+M).
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_tokens();
        &self.attn[i * n..(i + 1) * n]
    }

    pub fn weights(&self) -> &[f64] {
        &self.attn
    }
}

pub fn encode_attention_records(records: &[AttentionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ATT_MAGIC);
    out.extend_from_slice(&ATT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.n_image as u32).to_le_bytes());
        out.extend_from_slice(&(r.n_question as u32).to_le_bytes());
        out.extend_from_slice(&(r.sample_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.sample_id.as_bytes());
        for w in &r.attn {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IngestError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(IngestError::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, IngestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IngestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_attention_records(bytes: &[u8]) -> Result<Vec<AttentionRecord>, IngestError> {
    if bytes.len() < 4 || &bytes[..4] != ATT_MAGIC {
        return Err(IngestError::BadMagic { expected: "ATT1" });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != ATT_VERSION {
        return Err(IngestError::UnsupportedVersion(version));
    }
    let count = cur.u64()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n_image = cur.u32()? as usize;
        let n_question = cur.u32()? as usize;
        let id_len = cur.u32()? as usize;
        let sample_id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| IngestError::BadSampleId)?
            .to_string();
        let n = n_image + n_question;
        let raw = cur.take(n * n * 4)?;
        let attn = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push(AttentionRecord::new(sample_id, n_image, n_question, attn)?);
    }
    if cur.pos != bytes.len() {
        return Err(IngestError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(records)
}

pub fn read_attention_records(path: impl AsRef<Path>) -> Result<Vec<AttentionRecord>, IngestError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| IngestError::io(path, e))?;
    decode_attention_records(&bytes)
}

pub fn write_attention_records(records: &[AttentionRecord], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_attention_records(records))
        .and_then(|_| w.flush())
        .map_err(|e| IngestError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(id: &str, n: usize, m: usize) -> AttentionRecord {
        let t = n + m;
        AttentionRecord::new(id, n, m, vec![1.0 / t as f64; t * t]).unwrap()
    }

    #[test]
    fn round_trip_two_records() {
        let recs = vec![uniform("a", 2, 1), uniform("sample-002", 4, 2)];
        let back = decode_attention_records(&encode_attention_records(&recs)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].sample_id(), "sample-002");
        for (a, b) in recs.iter().zip(&back) {
            for (x, y) in a.weights().iter().zip(b.weights()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn row_sum_outside_tolerance_rejected() {
        let mut w = vec![1.0 / 3.0; 9];
        w[4] += 2e-4;
        let err = AttentionRecord::new("x", 2, 1, w).unwrap_err();
        assert!(matches!(err, IngestError::RowNotStochastic { row: 1, .. }));

        let mut w = vec![1.0 / 3.0; 9];
        w[4] += 5e-5;
        assert!(AttentionRecord::new("x", 2, 1, w).is_ok());
    }

    #[test]
    fn negative_weight_rejected() {
        let w = vec![0.5, 0.6, -0.1, 0.2, 0.3, 0.5, 0.2, 0.3, 0.5];
        assert!(matches!(
            AttentionRecord::new("x", 2, 1, w),
            Err(IngestError::InvalidWeight { row: 0, col: 2, .. })
        ));
    }

    #[test]
    fn truncated_and_trailing() {
        let bytes = encode_attention_records(&[uniform("a", 2, 1)]);
        assert!(matches!(
            decode_attention_records(&bytes[..bytes.len() - 1]),
            Err(IngestError::TruncatedPayload { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_attention_records(&extra), Err(IngestError::TrailingBytes(1))));
    }

    proptest! {
        #[test]
        fn random_stochastic_records_round_trip(
            n in 1usize..5, m in 1usize..4,
            raw in proptest::collection::vec(0.01f64..1.0, 64),
        ) {
            let t = n + m;
            let mut w = Vec::with_capacity(t * t);
            for i in 0..t {
                let row: Vec<f64> = (0..t).map(|j| raw[(i * t + j) % raw.len()]).collect();
                let s: f64 = row.iter().sum();
                w.extend(row.into_iter().map(|x| ((x / s) as f32) as f64));
            }
            let rec = AttentionRecord::new("s", n, m, w).unwrap();
            let back = decode_attention_records(&encode_attention_records(std::slice::from_ref(&rec))).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}
