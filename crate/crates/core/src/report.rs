//! CSV and JSON emitters and their readers. Every file is written to a
//! temporary sibling and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::ModalityTag;
use crate::shift::ShiftHeatmap;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Header plus string rows, quoted per RFC 4180.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// Rows as JSON objects keyed by header. Numeric cells become numbers
    /// and empty cells become `null`.
    pub fn to_json(&self) -> serde_json::Value {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let obj = self
                    .header
                    .iter()
                    .zip(r)
                    .map(|(h, v)| (h.clone(), cell_json(v)))
                    .collect::<serde_json::Map<_, _>>();
                serde_json::Value::Object(obj)
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

fn cell_json(v: &str) -> serde_json::Value {
    if v.is_empty() {
        return serde_json::Value::Null;
    }
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => serde_json::Number::from_f64(x)
            .map(serde_json::Value::Number)
            .unwrap_or_else(|| serde_json::Value::String(v.to_string())),
        _ => serde_json::Value::String(v.to_string()),
    }
}

/// Formats an optional float; `None` becomes an empty cell.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table_csv(path: &Path, table: &Table) -> Result<(), ReportError> {
    write_atomic(path, &table.to_csv())
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_table(dir: &Path, stem: &str, table: &Table) -> Result<Vec<PathBuf>, ReportError> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_table_csv(&csv_path, table)?;
    write_json(&json_path, &table.to_json())?;
    Ok(vec![csv_path, json_path])
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_table(path: &Path) -> Result<Table, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new().flexible(false).from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(csv_err)?;
    Ok(Table { header, rows })
}

/// Heatmap as a matrix: first column holds the descriptor, remaining
/// columns one dataset each.
pub fn heatmap_table(h: &ShiftHeatmap) -> Table {
    let mut t = Table::new(std::iter::once("tag".to_string()).chain(h.col_labels.iter().cloned()));
    for (tag, row) in h.row_labels.iter().zip(h.values.outer_iter()) {
        t.push(std::iter::once(tag.to_string()).chain(row.iter().map(|v| v.to_string())));
    }
    t
}

pub fn heatmap_from_table(t: &Table, path: &Path) -> Result<ShiftHeatmap, ReportError> {
    let bad = |message: String| ReportError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    if t.header.first().map(String::as_str) != Some("tag") {
        return Err(bad("first column must be 'tag'".into()));
    }
    let cols: Vec<String> = t.header[1..].to_vec();
    let mut tags = Vec::with_capacity(t.rows.len());
    let mut values = Array2::zeros((t.rows.len(), cols.len()));
    for (r, row) in t.rows.iter().enumerate() {
        tags.push(row[0].parse::<ModalityTag>().map_err(|e| bad(e.to_string()))?);
        for (c, cell) in row[1..].iter().enumerate() {
            values[[r, c]] = cell
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("row {}: bad value '{cell}'", r + 1)))?;
        }
    }
    Ok(ShiftHeatmap {
        row_labels: tags,
        col_labels: cols,
        values,
    })
}

pub fn read_heatmap(path: &Path) -> Result<ShiftHeatmap, ReportError> {
    heatmap_from_table(&read_table(path)?, path)
}
