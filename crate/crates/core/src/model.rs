//! Domain types shared across the toolkit and the empirical objects built
//! from raw tables.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// Default tolerance for simplex and row-stochastic checks.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("taxonomy needs at least 2 segments, got {0}")]
    TooFewSegments(usize),
    #[error("segment name at position {0} is empty")]
    EmptySegmentName(usize),
    #[error("segment name {0:?} appears more than once")]
    DuplicateSegment(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("segment index {index} out of range for K={k} (row {row})")]
    SegmentOutOfRange { row: usize, index: usize, k: usize },
    #[error("row {row} ({image_id}) lacks a {which} segment")]
    MissingLabel { row: usize, image_id: String, which: &'static str },
    #[error("no rows with true segment {0:?}")]
    EmptyRow(Vec<usize>),
    #[error("vector has length {actual}, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("confusion matrix entry ({row},{col}) = {value} outside [0,1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("confusion matrix row {row} sums to {sum}")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("confusion matrix must be square with K ≥ 1, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("prior is not on the probability simplex")]
    PriorNotSimplex,
    #[error("success rate p[{index}] = {value} outside [0,1]")]
    RateOutOfRange { index: usize, value: f64 },
    #[error("stored tau differs from C^T pi at index {index}")]
    TauMismatch { index: usize },
}

/// True iff all entries are ≥ −tol and the sum is within tol of 1.
pub fn validate_simplex(v: &[f64], tol: f64) -> bool {
    !v.is_empty() && v.iter().all(|&x| x >= -tol) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// A demographic attribute with an ordered list of segment names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyRaw")]
pub struct Taxonomy {
    attribute: String,
    segments: Vec<String>,
}

#[derive(Deserialize)]
struct TaxonomyRaw {
    attribute: String,
    segments: Vec<String>,
}

impl TryFrom<TaxonomyRaw> for Taxonomy {
    type Error = ModelError;
    fn try_from(raw: TaxonomyRaw) -> Result<Self, Self::Error> {
        Taxonomy::new(raw.attribute, raw.segments)
    }
}

impl Taxonomy {
    pub fn new(attribute: impl Into<String>, segments: Vec<String>) -> Result<Self, ModelError> {
        if segments.len() < 2 {
            return Err(ModelError::TooFewSegments(segments.len()));
        }
        let mut seen = HashSet::new();
        for (i, s) in segments.iter().enumerate() {
            if s.is_empty() {
                return Err(ModelError::EmptySegmentName(i));
            }
            if !seen.insert(s.as_str()) {
                return Err(ModelError::DuplicateSegment(s.clone()));
            }
        }
        Ok(Self { attribute: attribute.into(), segments })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn k(&self) -> usize {
        self.segments.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.segments[index]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRow {
    pub image_id: String,
    pub identity_id: String,
    pub true_segment: Option<usize>,
    pub predicted_segment: Option<usize>,
}

/// Per-image records, validated against a segment count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleTable {
    k: usize,
    rows: Vec<SampleRow>,
}

impl SampleTable {
    pub fn new(rows: Vec<SampleRow>, k: usize) -> Result<Self, ModelError> {
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if !seen.insert(row.image_id.as_str()) {
                return Err(ModelError::DuplicateImageId(row.image_id.clone()));
            }
            for index in [row.true_segment, row.predicted_segment].into_iter().flatten() {
                if index >= k {
                    return Err(ModelError::SegmentOutOfRange { row: i, index, k });
                }
            }
        }
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_rows(self) -> Vec<SampleRow> {
        self.rows
    }

    /// Iterates (true, predicted) pairs, failing on the first row missing either.
    pub fn labeled_pairs(&self) -> Result<Vec<(usize, usize)>, ModelError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = r.true_segment.ok_or_else(|| ModelError::MissingLabel {
                    row: i,
                    image_id: r.image_id.clone(),
                    which: "true",
                })?;
                let p = r.predicted_segment.ok_or_else(|| ModelError::MissingLabel {
                    row: i,
                    image_id: r.image_id.clone(),
                    which: "predicted",
                })?;
                Ok((t, p))
            })
            .collect()
    }
}

/// Row-stochastic matrix with entry (a,b) = P(predicted b | true a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfusionRaw")]
pub struct ConfusionMatrix {
    entries: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row_counts: Option<Vec<u64>>,
}

#[derive(Deserialize)]
struct ConfusionRaw {
    entries: Matrix,
    #[serde(default)]
    row_counts: Option<Vec<u64>>,
}

impl TryFrom<ConfusionRaw> for ConfusionMatrix {
    type Error = ModelError;
    fn try_from(raw: ConfusionRaw) -> Result<Self, Self::Error> {
        let mut c = ConfusionMatrix::new(raw.entries)?;
        if let Some(counts) = raw.row_counts {
            if counts.len() != c.k() {
                return Err(ModelError::LengthMismatch { expected: c.k(), actual: counts.len() });
            }
            c.row_counts = Some(counts);
        }
        Ok(c)
    }
}

impl ConfusionMatrix {
    pub fn new(entries: Matrix) -> Result<Self, ModelError> {
        Self::with_tolerance(entries, DEFAULT_TOL)
    }

    pub fn with_tolerance(entries: Matrix, tol: f64) -> Result<Self, ModelError> {
        if !entries.is_square() || entries.rows() == 0 {
            return Err(ModelError::BadShape { rows: entries.rows(), cols: entries.cols() });
        }
        for a in 0..entries.rows() {
            for b in 0..entries.cols() {
                let value = entries[(a, b)];
                if !(0.0..=1.0).contains(&value) {
                    return Err(ModelError::EntryOutOfRange { row: a, col: b, value });
                }
            }
            let sum: f64 = entries.row(a).iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(ModelError::RowNotStochastic { row: a, sum });
            }
        }
        Ok(Self { entries, row_counts: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let m = Matrix::from_rows(rows)
            .map_err(|_| ModelError::BadShape { rows: rows.len(), cols: 0 })?;
        Self::new(m)
    }

    pub fn identity(k: usize) -> Self {
        Self { entries: Matrix::identity(k), row_counts: None }
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[(a, b)]
    }

    pub fn row_counts(&self) -> Option<&[u64]> {
        self.row_counts.as_deref()
    }

    pub fn transpose(&self) -> Matrix {
        self.entries.transpose()
    }
}

/// Builds the empirical confusion matrix from a fully labeled table.
pub fn empirical_confusion(table: &SampleTable, taxonomy: &Taxonomy) -> Result<ConfusionMatrix, ModelError> {
    let k = taxonomy.k();
    let pairs = table.labeled_pairs()?;
    let mut counts = vec![vec![0u64; k]; k];
    for (t, p) in pairs {
        counts[t][p] += 1;
    }
    let row_counts: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let empty: Vec<usize> = (0..k).filter(|&a| row_counts[a] == 0).collect();
    if !empty.is_empty() {
        return Err(ModelError::EmptyRow(empty));
    }
    let mut entries = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            entries[(a, b)] = counts[a][b] as f64 / row_counts[a] as f64;
        }
    }
    let mut c = ConfusionMatrix::new(entries)?;
    c.row_counts = Some(row_counts);
    Ok(c)
}

/// The generative triple (π, p, C) with derived τ = Cᵀπ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroupModelRaw")]
pub struct GroupModel {
    pi: Vec<f64>,
    p: Vec<f64>,
    confusion: ConfusionMatrix,
    tau: Vec<f64>,
}

#[derive(Deserialize)]
struct GroupModelRaw {
    pi: Vec<f64>,
    p: Vec<f64>,
    confusion: ConfusionMatrix,
    #[serde(default)]
    tau: Option<Vec<f64>>,
}

impl TryFrom<GroupModelRaw> for GroupModel {
    type Error = ModelError;
    fn try_from(raw: GroupModelRaw) -> Result<Self, Self::Error> {
        let model = GroupModel::new(raw.pi, raw.p, raw.confusion)?;
        if let Some(stored) = raw.tau {
            model.check_tau(&stored)?;
        }
        Ok(model)
    }
}

impl GroupModel {
    pub fn new(pi: Vec<f64>, p: Vec<f64>, confusion: ConfusionMatrix) -> Result<Self, ModelError> {
        let k = confusion.k();
        if pi.len() != k {
            return Err(ModelError::LengthMismatch { expected: k, actual: pi.len() });
        }
        if p.len() != k {
            return Err(ModelError::LengthMismatch { expected: k, actual: p.len() });
        }
        if !validate_simplex(&pi, DEFAULT_TOL) || pi.iter().any(|&x| x < 0.0) {
            return Err(ModelError::PriorNotSimplex);
        }
        if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ModelError::RateOutOfRange { index, value });
        }
        let tau = tau_from(&confusion, &pi);
        Ok(Self { pi, p, confusion, tau })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.confusion
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Checks a stored τ against a fresh Cᵀπ to 1e-12.
    pub fn check_tau(&self, stored: &[f64]) -> Result<(), ModelError> {
        if stored.len() != self.k() {
            return Err(ModelError::LengthMismatch { expected: self.k(), actual: stored.len() });
        }
        match stored.iter().zip(&self.tau).position(|(a, b)| (a - b).abs() > 1e-12) {
            Some(index) => Err(ModelError::TauMismatch { index }),
            None => Ok(()),
        }
    }
}

fn tau_from(c: &ConfusionMatrix, pi: &[f64]) -> Vec<f64> {
    let k = c.k();
    (0..k).map(|b| (0..k).map(|a| pi[a] * c.get(a, b)).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryTrial {
    pub identity_id: String,
    pub y: bool,
    pub g_true: Option<usize>,
    pub g_hat: usize,
}

/// Observed (Ĝ, Y) pairs, optionally with the latent true group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTrialTable {
    k: usize,
    rows: Vec<BinaryTrial>,
}

impl BinaryTrialTable {
    pub fn new(rows: Vec<BinaryTrial>, k: usize) -> Result<Self, ModelError> {
        for (i, r) in rows.iter().enumerate() {
            for index in std::iter::once(r.g_hat).chain(r.g_true) {
                if index >= k {
                    return Err(ModelError::SegmentOutOfRange { row: i, index, k });
                }
            }
        }
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[BinaryTrial] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Raw per-observed-group counts and successes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub counts: Vec<u64>,
    pub successes: Vec<u64>,
}

impl GroupCounts {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![0; k], successes: vec![0; k] }
    }

    pub fn record(&mut self, g_hat: usize, y: bool) {
        self.counts[g_hat] += 1;
        if y {
            self.successes[g_hat] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn group_counts(table: &BinaryTrialTable, k: usize) -> GroupCounts {
    let mut out = GroupCounts::zeros(k);
    for r in table.rows() {
        out.record(r.g_hat, r.y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxonomy2() -> Taxonomy {
        Taxonomy::new("gender", vec!["A".into(), "B".into()]).unwrap()
    }

    fn table(pairs: &[(usize, usize)]) -> SampleTable {
        let rows = pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| SampleRow {
                image_id: format!("img{i}"),
                identity_id: format!("id{i}"),
                true_segment: Some(t),
                predicted_segment: Some(p),
            })
            .collect();
        SampleTable::new(rows, 2).unwrap()
    }

    #[test]
    fn simplex_predicate() {
        assert!(validate_simplex(&[0.25; 4], 1e-9));
        assert!(!validate_simplex(&[0.5, 0.6], 1e-9));
        assert!(validate_simplex(&[1.0, 0.0], 1e-9));
        assert!(!validate_simplex(&[1.5, -0.5], 1e-9));
    }

    #[test]
    fn taxonomy_validation() {
        assert_eq!(Taxonomy::new("x", vec!["a".into()]), Err(ModelError::TooFewSegments(1)));
        assert!(matches!(Taxonomy::new("x", vec!["a".into(), "a".into()]), Err(ModelError::DuplicateSegment(_))));
        assert!(matches!(Taxonomy::new("x", vec!["a".into(), "".into()]), Err(ModelError::EmptySegmentName(1))));
        let t: Result<Taxonomy, _> = serde_json::from_str(r#"{"attribute":"x","segments":["a"]}"#);
        assert!(t.is_err());
    }

    #[test]
    fn perfect_classifier_gives_identity() {
        let c = empirical_confusion(&table(&[(0, 0), (0, 0), (1, 1), (1, 1)]), &taxonomy2()).unwrap();
        assert_eq!(c.entries(), &Matrix::identity(2));
        assert_eq!(c.row_counts(), Some(&[2u64, 2][..]));
    }

    #[test]
    fn hand_counted_confusion() {
        let c = empirical_confusion(&table(&[(0, 0), (0, 1), (1, 1), (1, 1)]), &taxonomy2()).unwrap();
        assert_eq!(c.entries().to_rows(), vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
    }

    #[test]
    fn uncovered_true_class_is_error() {
        let err = empirical_confusion(&table(&[(0, 1), (0, 1)]), &taxonomy2()).unwrap_err();
        assert_eq!(err, ModelError::EmptyRow(vec![1]));
    }

    #[test]
    fn missing_label_is_error() {
        let rows = vec![SampleRow {
            image_id: "a".into(),
            identity_id: "i".into(),
            true_segment: Some(0),
            predicted_segment: None,
        }];
        let t = SampleTable::new(rows, 2).unwrap();
        assert!(matches!(empirical_confusion(&t, &taxonomy2()), Err(ModelError::MissingLabel { .. })));
    }

    #[test]
    fn sample_table_rejects_duplicates_and_range() {
        let row = |id: &str, t| SampleRow {
            image_id: id.into(),
            identity_id: "i".into(),
            true_segment: Some(t),
            predicted_segment: None,
        };
        assert!(matches!(SampleTable::new(vec![row("a", 0), row("a", 1)], 2), Err(ModelError::DuplicateImageId(_))));
        assert!(matches!(SampleTable::new(vec![row("a", 2)], 2), Err(ModelError::SegmentOutOfRange { .. })));
    }

    #[test]
    fn confusion_validation() {
        assert!(matches!(
            ConfusionMatrix::from_rows(&[vec![0.5, 0.6], vec![0.0, 1.0]]),
            Err(ModelError::RowNotStochastic { row: 0, .. })
        ));
        assert!(matches!(
            ConfusionMatrix::from_rows(&[vec![1.5, -0.5], vec![0.0, 1.0]]),
            Err(ModelError::EntryOutOfRange { .. })
        ));
    }

    #[test]
    fn group_model_tau() {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let m = GroupModel::new(vec![0.25, 0.75], vec![0.9, 0.7], c).unwrap();
        assert!((m.tau()[0] - (0.225 + 0.15)).abs() < 1e-15);
        assert!((m.tau()[1] - (0.025 + 0.6)).abs() < 1e-15);
        assert!(m.check_tau(&[0.375, 0.625]).is_ok());
        assert_eq!(m.check_tau(&[0.4, 0.6]), Err(ModelError::TauMismatch { index: 0 }));
        assert!(GroupModel::new(vec![0.5, 0.6], vec![0.9, 0.7], ConfusionMatrix::identity(2)).is_err());
        assert!(GroupModel::new(vec![0.5, 0.5], vec![1.2, 0.7], ConfusionMatrix::identity(2)).is_err());
    }

    #[test]
    fn group_model_json_round_trip() {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let m = GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: GroupModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let bad = json.replace("\"tau\":[0.5,0.5]", "\"tau\":[0.6,0.4]");
        assert!(serde_json::from_str::<GroupModel>(&bad).is_err());
    }

    fn trials(ys: &[bool], gs: &[usize]) -> BinaryTrialTable {
        let rows = ys
            .iter()
            .zip(gs)
            .enumerate()
            .map(|(i, (&y, &g))| BinaryTrial { identity_id: format!("id{i}"), y, g_true: None, g_hat: g })
            .collect();
        BinaryTrialTable::new(rows, 2).unwrap()
    }

    #[test]
    fn group_count_examples() {
        let gc = group_counts(&trials(&[true, false, true], &[0, 0, 1]), 2);
        assert_eq!(gc.counts, vec![2, 1]);
        assert_eq!(gc.successes, vec![1, 1]);
        let gc = group_counts(&trials(&[true], &[0]), 2);
        assert_eq!(gc.counts, vec![1, 0]);
        assert_eq!(gc.successes, vec![1, 0]);
        let gc = group_counts(&trials(&[false, false], &[0, 1]), 2);
        assert_eq!(gc.successes, vec![0, 0]);
    }
}
