//! On-disk formats: EMB1 embedding matrices, ATT1 attention records, JSON
//! dataset manifests.

mod att;
mod emb;
mod manifest;
mod tag;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use att::{
    decode_attention_records, encode_attention_records, read_attention_records, write_attention_records,
    AttentionRecord, ATT_MAGIC, ROW_SUM_TOLERANCE,
};
pub use emb::{
    decode_embedding_matrix, encode_embedding_matrix, read_embedding_matrix, write_embedding_matrix, Dtype,
    EmbeddingMatrix, EMB_HEADER_LEN, EMB_MAGIC,
};
pub use manifest::{
    load_manifest, parse_manifest, DatasetManifest, LabeledEmbedding, ManifestEntry, Role, ShiftType, Split,
};
pub use tag::{Modality, ModalityTag, TrainingState};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("non-finite entry at row {row}, col {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("zero dimension: {rows}x{cols}")]
    DimensionZero { rows: usize, cols: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("sample id is not valid UTF-8")]
    BadSampleId,
    #[error("record {sample_id}: N and M must both be at least 1")]
    EmptyModality { sample_id: String },
    #[error("record {sample_id}: expected {expected} weights, found {found}")]
    AttentionShape {
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("record {sample_id}: invalid weight at row {row}, col {col}")]
    InvalidWeight { sample_id: String, row: usize, col: usize },
    #[error("record {sample_id}: row {row} sums to {sum}")]
    RowNotStochastic { sample_id: String, row: usize, sum: f64 },
    #[error("bad tag: {0}")]
    BadTag(String),
    #[error("manifest syntax: {0}")]
    ManifestSyntax(String),
    #[error("expected exactly one ID-train entry, found {found}")]
    MissingIdTrain { found: usize },
    #[error("duplicate dataset id '{0}'")]
    DuplicateDatasetId(String),
    #[error("dataset '{dataset_id}': path {path} does not exist")]
    DanglingPath { dataset_id: String, path: PathBuf },
    #[error("unknown shift type '{0}'")]
    UnknownShiftType(String),
    #[error("unknown role '{0}'")]
    UnknownRole(String),
    #[error("dataset '{dataset_id}': published accuracy {value} outside [0, 100]")]
    AccuracyOutOfRange { dataset_id: String, value: f64 },
    #[error("dataset '{dataset_id}': model '{model_id}' is not declared joint-capable")]
    JointUnsupported { dataset_id: String, model_id: String },
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("missing embedding {tag} for dataset '{dataset_id}'")]
    MissingEmbedding { tag: String, dataset_id: String },
    #[error("dataset '{dataset_id}': {ids} sample ids for {rows} rows")]
    SampleIdCount {
        dataset_id: String,
        ids: usize,
        rows: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
