//! On-disk formats: FEMB embeddings, per-image label CSVs, binary-trial
//! CSVs, JSON documents and trained-head documents.
//!
//! FEMB layout (little endian):
//!
//! ```text
//! "FEMB"  u32 version=1  u32 I  u32 D  f32[I*D] row-major  I ids, each followed by '\n'
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{BinaryTrial, BinaryTrialTable, SampleRow, SampleTable, Taxonomy};
use crate::probing::{EmbeddingSet, HeadKind, Machine, MachineDiagnostics, SupportSet, SvmHead};

pub const FEMB_MAGIC: &[u8; 4] = b"FEMB";
pub const FEMB_VERSION: u32 = 1;
const FEMB_HEADER: usize = 16;

pub const HEAD_FORMAT: &str = "fairprobe.svm-head";
pub const HEAD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing FEMB magic header")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated, needed {needed} bytes past offset {offset}")]
    TruncatedFile { path: PathBuf, offset: usize, needed: usize },
    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFiniteValue { path: PathBuf, row: usize, col: usize },
    #[error("{path}: record {record}: invalid image id: {reason}")]
    BadIdentifier { path: PathBuf, record: u64, reason: String },
    #[error("{path}: missing required column {column:?}")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("{path}: line {line}: unknown segment {name:?}")]
    UnknownSegment { path: PathBuf, line: u64, name: String },
    #[error("{path}: line {line}: duplicate image id {id:?}")]
    DuplicateImageId { path: PathBuf, line: u64, id: String },
    #[error("{path}: line {line}: invalid {column} value {value:?}")]
    InvalidValue { path: PathBuf, line: u64, column: &'static str, value: String },
    #[error("{path}: line {line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{path}: line {line}, column {column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: sha256 {actual} does not match recorded {expected}")]
    DigestMismatch { path: PathBuf, expected: String, actual: String },
}

impl FormatError {
    pub fn path(&self) -> &Path {
        match self {
            FormatError::Io { path, .. }
            | FormatError::BadMagic { path }
            | FormatError::UnsupportedVersion { path, .. }
            | FormatError::TruncatedFile { path, .. }
            | FormatError::NonFiniteValue { path, .. }
            | FormatError::BadIdentifier { path, .. }
            | FormatError::MissingColumn { path, .. }
            | FormatError::UnknownSegment { path, .. }
            | FormatError::DuplicateImageId { path, .. }
            | FormatError::InvalidValue { path, .. }
            | FormatError::Csv { path, .. }
            | FormatError::Json { path, .. }
            | FormatError::Invalid { path, .. }
            | FormatError::DigestMismatch { path, .. } => path,
        }
    }

    /// Offending line, row or record, when the error has one.
    pub fn record(&self) -> Option<u64> {
        match self {
            FormatError::NonFiniteValue { row, .. } => Some(*row as u64),
            FormatError::BadIdentifier { record, .. } => Some(*record),
            FormatError::UnknownSegment { line, .. }
            | FormatError::DuplicateImageId { line, .. }
            | FormatError::InvalidValue { line, .. }
            | FormatError::Csv { line, .. } => Some(*line),
            FormatError::Json { line, .. } => Some(*line as u64),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::Io { .. } => "Io",
            FormatError::BadMagic { .. } => "BadMagic",
            FormatError::UnsupportedVersion { .. } => "UnsupportedVersion",
            FormatError::TruncatedFile { .. } => "TruncatedFile",
            FormatError::NonFiniteValue { .. } => "NonFiniteValue",
            FormatError::BadIdentifier { .. } => "BadIdentifier",
            FormatError::MissingColumn { .. } => "MissingColumn",
            FormatError::UnknownSegment { .. } => "UnknownSegment",
            FormatError::DuplicateImageId { .. } => "DuplicateImageId",
            FormatError::InvalidValue { .. } => "InvalidValue",
            FormatError::Csv { .. } => "Csv",
            FormatError::Json { .. } => "Json",
            FormatError::Invalid { .. } => "Invalid",
            FormatError::DigestMismatch { .. } => "DigestMismatch",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn invalid(path: &Path, err: impl std::fmt::Display) -> FormatError {
    FormatError::Invalid { path: path.to_path_buf(), message: err.to_string() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, FormatError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(FEMB_HEADER + set.data().len() * 4);
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    let rows = u32::try_from(set.len()).map_err(|_| "too many rows for FEMB".to_string())?;
    let dim = u32::try_from(set.dim()).map_err(|_| "dimension too large for FEMB".to_string())?;
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in set.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for id in set.image_ids() {
        if id.contains('\n') {
            return Err(format!("image id {id:?} contains a newline"));
        }
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingSet, FormatError> {
    let truncated = |offset: usize, needed: usize| FormatError::TruncatedFile { path: path.to_path_buf(), offset, needed };
    if bytes.len() < 4 || &bytes[..4] != FEMB_MAGIC {
        return Err(FormatError::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < FEMB_HEADER {
        return Err(truncated(4, FEMB_HEADER - 4));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEMB_VERSION {
        return Err(FormatError::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    let payload = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| invalid(path, "header dimensions overflow"))?;
    if bytes.len() < FEMB_HEADER + payload {
        return Err(truncated(FEMB_HEADER, payload));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in bytes[FEMB_HEADER..FEMB_HEADER + payload].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFiniteValue { path: path.to_path_buf(), row: i / dim, col: i % dim });
        }
        data.push(f64::from(v));
    }
    let tail = std::str::from_utf8(&bytes[FEMB_HEADER + payload..]).map_err(|e| FormatError::BadIdentifier {
        path: path.to_path_buf(),
        record: 0,
        reason: e.to_string(),
    })?;
    let mut ids: Vec<String> = tail.split('\n').map(str::to_string).collect();
    if ids.last().is_some_and(String::is_empty) {
        ids.pop();
    }
    if ids.len() < rows {
        return Err(truncated(FEMB_HEADER + payload, rows - ids.len()));
    }
    if ids.len() > rows {
        return Err(FormatError::BadIdentifier {
            path: path.to_path_buf(),
            record: rows as u64,
            reason: format!("{} ids for {rows} rows", ids.len()),
        });
    }
    if let Some(pos) = ids.iter().position(String::is_empty) {
        return Err(FormatError::BadIdentifier { path: path.to_path_buf(), record: pos as u64, reason: "empty id".into() });
    }
    EmbeddingSet::new(ids, dim, data).map_err(|e| invalid(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, FormatError> {
    decode_embeddings(&fs::read(path).map_err(io_err(path))?, path)
}

/// Writes embeddings as f32; values not representable in f32 are rounded.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<(), FormatError> {
    let bytes = encode_embeddings(set).map_err(|e| invalid(path, e))?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_err(path: &Path, line: u64, e: impl std::fmt::Display) -> FormatError {
    FormatError::Csv { path: path.to_path_buf(), line, message: e.to_string() }
}

struct Columns {
    index: Vec<(String, usize)>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Self { index: headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect() }
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.index.iter().find(|(h, _)| h == name).map(|(_, i)| *i)
    }

    fn require(&self, name: &'static str, path: &Path) -> Result<usize, FormatError> {
        self.find(name).ok_or(FormatError::MissingColumn { path: path.to_path_buf(), column: name })
    }
}

fn resolve_segment(taxonomy: &Taxonomy, value: &str, path: &Path, line: u64) -> Result<usize, FormatError> {
    taxonomy
        .index_of(value)
        .ok_or_else(|| FormatError::UnknownSegment { path: path.to_path_buf(), line, name: value.to_string() })
}

fn optional_segment(
    record: &csv::StringRecord,
    col: Option<usize>,
    taxonomy: &Taxonomy,
    path: &Path,
    line: u64,
) -> Result<Option<usize>, FormatError> {
    match col.and_then(|c| record.get(c)).map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => resolve_segment(taxonomy, v, path, line).map(Some),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads `image_id,identity_id[,true_segment][,predicted_segment]`.
/// Segment cells hold names from the taxonomy; empty cells are absent labels.
pub fn read_labels(path: &Path, taxonomy: &Taxonomy) -> Result<SampleTable, FormatError> {
    let mut rdr = reader(path)?;
    let cols = Columns::new(rdr.headers().map_err(|e| csv_err(path, 1, e))?);
    let image_col = cols.require("image_id", path)?;
    let identity_col = cols.require("identity_id", path)?;
    let true_col = cols.find("true_segment");
    let pred_col = cols.find("predicted_segment");
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let image_id = record.get(image_col).unwrap_or("").trim().to_string();
        if image_id.is_empty() {
            return Err(FormatError::InvalidValue { path: path.to_path_buf(), line, column: "image_id", value: image_id });
        }
        if !seen.insert(image_id.clone()) {
            return Err(FormatError::DuplicateImageId { path: path.to_path_buf(), line, id: image_id });
        }
        let identity_id = record.get(identity_col).unwrap_or("").trim().to_string();
        if identity_id.is_empty() {
            return Err(FormatError::InvalidValue { path: path.to_path_buf(), line, column: "identity_id", value: identity_id });
        }
        rows.push(SampleRow {
            image_id,
            identity_id,
            true_segment: optional_segment(&record, true_col, taxonomy, path, line)?,
            predicted_segment: optional_segment(&record, pred_col, taxonomy, path, line)?,
        });
    }
    SampleTable::new(rows, taxonomy.k()).map_err(|e| invalid(path, e))
}

pub fn encode_labels(table: &SampleTable, taxonomy: &Taxonomy) -> Result<Vec<u8>, csv::Error> {
    let has_true = table.rows().iter().any(|r| r.true_segment.is_some());
    let has_pred = table.rows().iter().any(|r| r.predicted_segment.is_some());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id", "identity_id"];
    if has_true {
        header.push("true_segment");
    }
    if has_pred {
        header.push("predicted_segment");
    }
    wtr.write_record(&header)?;
    let name = |s: Option<usize>| s.map_or("", |i| taxonomy.name(i));
    for r in table.rows() {
        let mut rec = vec![r.image_id.as_str(), r.identity_id.as_str()];
        if has_true {
            rec.push(name(r.true_segment));
        }
        if has_pred {
            rec.push(name(r.predicted_segment));
        }
        wtr.write_record(&rec)?;
    }
    Ok(wtr.into_inner().expect("vec writer"))
}

pub fn write_labels(path: &Path, table: &SampleTable, taxonomy: &Taxonomy) -> Result<(), FormatError> {
    let bytes = encode_labels(table, taxonomy).map_err(|e| invalid(path, e))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads `identity_id,y,g_hat[,g_true]` with y in {0,1} and segment names.
pub fn read_trials(path: &Path, taxonomy: &Taxonomy) -> Result<BinaryTrialTable, FormatError> {
    let mut rdr = reader(path)?;
    let cols = Columns::new(rdr.headers().map_err(|e| csv_err(path, 1, e))?);
    let id_col = cols.require("identity_id", path)?;
    let y_col = cols.require("y", path)?;
    let hat_col = cols.require("g_hat", path)?;
    let true_col = cols.find("g_true");
    let mut rows = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let y = match record.get(y_col).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(FormatError::InvalidValue {
                    path: path.to_path_buf(),
                    line,
                    column: "y",
                    value: other.unwrap_or("").to_string(),
                })
            }
        };
        let g_hat = resolve_segment(taxonomy, record.get(hat_col).unwrap_or("").trim(), path, line)?;
        rows.push(BinaryTrial {
            identity_id: record.get(id_col).unwrap_or("").trim().to_string(),
            y,
            g_true: optional_segment(&record, true_col, taxonomy, path, line)?,
            g_hat,
        });
    }
    BinaryTrialTable::new(rows, taxonomy.k()).map_err(|e| invalid(path, e))
}

pub fn encode_trials(table: &BinaryTrialTable, taxonomy: &Taxonomy) -> Result<Vec<u8>, csv::Error> {
    let has_true = table.rows().iter().any(|r| r.g_true.is_some());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["identity_id", "y", "g_hat"];
    if has_true {
        header.push("g_true");
    }
    wtr.write_record(&header)?;
    for r in table.rows() {
        let mut rec = vec![r.identity_id.as_str(), if r.y { "1" } else { "0" }, taxonomy.name(r.g_hat)];
        if has_true {
            rec.push(r.g_true.map_or("", |g| taxonomy.name(g)));
        }
        wtr.write_record(&rec)?;
    }
    Ok(wtr.into_inner().expect("vec writer"))
}

pub fn write_trials(path: &Path, table: &BinaryTrialTable, taxonomy: &Taxonomy) -> Result<(), FormatError> {
    let bytes = encode_trials(table, taxonomy).map_err(|e| invalid(path, e))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Serializes rows with a header row, via serde.
pub fn encode_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    Ok(wtr.into_inner().expect("vec writer"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline. Floats use the shortest
/// representation that round-trips.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    write_bytes(path, &to_json_bytes(value))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Location and digest of the training embeddings an RBF head refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub embeddings: String,
    pub sha256: String,
    pub indices: Vec<usize>,
}

/// Versioned JSON form of a trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDocument {
    pub format: String,
    pub version: u32,
    pub kind: HeadKind,
    pub taxonomy: Taxonomy,
    pub dim: usize,
    pub regularization: f64,
    pub class_weights: Vec<f64>,
    #[serde(default)]
    pub class_weights_generalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub machines: Vec<Machine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<SupportRef>,
    #[serde(default)]
    pub diagnostics: Vec<MachineDiagnostics>,
}

impl HeadDocument {
    /// `embeddings` locates the training set (path as given, sha256 digest);
    /// required for RBF heads.
    pub fn from_head(
        head: &SvmHead,
        taxonomy: &Taxonomy,
        generalized_weights: bool,
        embeddings: Option<(&str, &str)>,
    ) -> Result<Self, String> {
        let support = match (&head.support, embeddings) {
            (Some(s), Some((path, digest))) => Some(SupportRef {
                embeddings: path.to_string(),
                sha256: digest.to_string(),
                indices: s.indices.clone(),
            }),
            (Some(_), None) => return Err("rbf head needs a training embedding reference".into()),
            (None, _) => None,
        };
        Ok(Self {
            format: HEAD_FORMAT.to_string(),
            version: HEAD_VERSION,
            kind: head.kind,
            taxonomy: taxonomy.clone(),
            dim: head.dim,
            regularization: head.regularization,
            class_weights: head.class_weights.clone(),
            class_weights_generalized: generalized_weights,
            gamma: head.gamma,
            machines: head.machines.clone(),
            support,
            diagnostics: head.diagnostics.clone(),
        })
    }

    /// Rebuilds the head; RBF heads pull their support vectors from
    /// `training`, which must be the referenced embedding set.
    pub fn into_head(self, training: Option<&EmbeddingSet>) -> Result<SvmHead, String> {
        if self.format != HEAD_FORMAT || self.version != HEAD_VERSION {
            return Err(format!("unsupported head format {} v{}", self.format, self.version));
        }
        if self.machines.len() != self.taxonomy.k() {
            return Err(format!("{} machines for {} segments", self.machines.len(), self.taxonomy.k()));
        }
        let support = match self.kind {
            HeadKind::Linear => {
                if self.machines.iter().any(|m| m.coefficients.len() != self.dim) {
                    return Err("linear weight length differs from dim".into());
                }
                None
            }
            HeadKind::Rbf => {
                let sref = self.support.as_ref().ok_or("rbf head without support reference")?;
                let training = training.ok_or("rbf head needs its training embeddings")?;
                if training.dim() != self.dim {
                    return Err(format!("training embeddings have D={}, head expects {}", training.dim(), self.dim));
                }
                if self.machines.iter().any(|m| m.coefficients.len() != sref.indices.len()) {
                    return Err("dual coefficient count differs from support size".into());
                }
                if !self.gamma.is_some_and(|g| g > 0.0) {
                    return Err("rbf head needs a positive gamma".into());
                }
                let vectors = training.select(&sref.indices).map_err(|e| e.to_string())?;
                Some(SupportSet { indices: sref.indices.clone(), vectors })
            }
        };
        Ok(SvmHead {
            kind: self.kind,
            dim: self.dim,
            regularization: self.regularization,
            class_weights: self.class_weights,
            gamma: self.gamma,
            machines: self.machines,
            support,
            diagnostics: self.diagnostics,
        })
    }
}
