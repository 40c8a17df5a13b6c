//! Audit report assembly: accuracy, fairness, robustness and the optional
//! estimator block, plus input provenance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    self, BiasReport, Correction, EstimatorError, InflationFactor, PluginEstimate,
};
use crate::metrics::{self, MetricsError, RateScale, RobustnessScores};
use crate::model::{validate_simplex, BinaryTrialTable, ConfusionMatrix, GroupModel, ModelError, SampleRow, SampleTable, Taxonomy, DEFAULT_TOL};

pub const AUDIT_FORMAT: &str = "fairprobe.audit";
pub const TOOL_NAME: &str = "fairprobe";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("prediction for unknown image {0:?}")]
    UnknownImage(String),
    #[error("image {0:?} has no prediction")]
    MissingPrediction(String),
    #[error("prior has length {actual}, expected {expected}")]
    PriorLength { expected: usize, actual: usize },
    #[error("prior is not a probability vector")]
    PriorNotSimplex,
    #[error("estimated prior is not positive for groups {0:?}")]
    NonPositivePrior(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Prior file contents: a bare array or `{"pi": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorDocument {
    Bare(Vec<f64>),
    Wrapped { pi: Vec<f64> },
}

impl PriorDocument {
    pub fn into_vec(self) -> Vec<f64> {
        match self {
            PriorDocument::Bare(v) | PriorDocument::Wrapped { pi: v } => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
}

impl Provenance {
    pub fn new(seed: u64, inputs: Vec<InputRecord>) -> Self {
        Self { tool: TOOL_NAME.into(), version: TOOL_VERSION.into(), seed, inputs }
    }
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub scale: RateScale,
    pub images: usize,
    pub micro: f64,
    pub per_group: Vec<f64>,
}

/// Differences are percentage points; ratios are unitless and absent when
/// the largest rate is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessBlock {
    pub scale: RateScale,
    pub dob: f64,
    pub dob_relative: Option<f64>,
    pub dpd: f64,
    pub dpr: Option<f64>,
    pub eod: f64,
    pub eor: Option<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessBlock {
    pub min_images: u64,
    #[serde(flatten)]
    pub scores: RobustnessScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    Supplied,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorBlock {
    pub trials: usize,
    pub plugin: PluginEstimate,
    pub prior: Vec<f64>,
    pub prior_source: PriorSource,
    pub condition: f64,
    /// Absent when some group has no trials (non-strict mode only).
    pub corrected: Option<Vec<f64>>,
    pub inflation_factor: InflationFactor,
    /// Bias of the plug-in under (prior, corrected rates clamped to [0,1], C).
    pub plugin_bias: Option<BiasReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub format: String,
    pub taxonomy: Taxonomy,
    pub accuracy: AccuracyBlock,
    pub fairness: FairnessBlock,
    pub robustness: RobustnessBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorBlock>,
    pub provenance: Provenance,
}

/// Inputs to the estimator block.
pub struct EstimatorInputs<'a> {
    pub trials: &'a BinaryTrialTable,
    pub confusion: &'a ConfusionMatrix,
    pub prior: Option<Vec<f64>>,
    pub strict: bool,
    pub seed: u64,
}

/// Overlays predicted segments onto the label table by image id. Identity
/// and true segment come from `labels`.
pub fn merge_predictions(labels: &SampleTable, preds: &SampleTable) -> Result<SampleTable, ReportError> {
    let by_image: HashMap<&str, Option<usize>> =
        preds.rows().iter().map(|r| (r.image_id.as_str(), r.predicted_segment)).collect();
    let known: std::collections::HashSet<&str> = labels.rows().iter().map(|r| r.image_id.as_str()).collect();
    if let Some(r) = preds.rows().iter().find(|r| !known.contains(r.image_id.as_str())) {
        return Err(ReportError::UnknownImage(r.image_id.clone()));
    }
    let mut rows = Vec::with_capacity(labels.len());
    for r in labels.rows() {
        let predicted = by_image
            .get(r.image_id.as_str())
            .copied()
            .flatten()
            .ok_or_else(|| ReportError::MissingPrediction(r.image_id.clone()))?;
        rows.push(SampleRow { predicted_segment: Some(predicted), ..r.clone() });
    }
    Ok(SampleTable::new(rows, labels.k())?)
}

pub fn accuracy_block(table: &SampleTable, taxonomy: &Taxonomy) -> Result<AccuracyBlock, ReportError> {
    let micro = metrics::micro_accuracy(table)?;
    let per_group = metrics::per_group_accuracy(table, taxonomy)?.to_percent();
    Ok(AccuracyBlock {
        scale: RateScale::Percent,
        images: table.len(),
        micro: micro * 100.0,
        per_group: per_group.rates().to_vec(),
    })
}

/// Per-segment accuracy doubles as one-vs-rest TPR.
pub fn fairness_block(table: &SampleTable, taxonomy: &Taxonomy) -> Result<FairnessBlock, ReportError> {
    let tpr = metrics::per_group_accuracy(table, taxonomy)?.to_percent();
    let fpr = metrics::per_group_false_positive_rate(table, taxonomy)?.to_percent();
    let dp = metrics::demographic_parity(&tpr);
    let eo = metrics::equalized_odds(&tpr, &fpr)?;
    Ok(FairnessBlock {
        scale: RateScale::Percent,
        dob: metrics::degree_of_bias(&tpr),
        dob_relative: metrics::degree_of_bias_relative(&tpr).ok(),
        dpd: dp.difference,
        dpr: dp.ratio,
        eod: eo.difference,
        eor: eo.ratio,
        tpr: tpr.rates().to_vec(),
        fpr: fpr.rates().to_vec(),
    })
}

pub fn estimator_block(inputs: EstimatorInputs<'_>) -> Result<EstimatorBlock, ReportError> {
    let c = inputs.confusion;
    let k = c.k();
    let plugin = estimator::plugin_estimate(inputs.trials, k, inputs.strict)?;
    let correction = Correction::new(c)?;
    let (prior, prior_source) = match inputs.prior {
        Some(pi) => {
            if pi.len() != k {
                return Err(ReportError::PriorLength { expected: k, actual: pi.len() });
            }
            if !validate_simplex(&pi, DEFAULT_TOL) {
                return Err(ReportError::PriorNotSimplex);
            }
            (pi, PriorSource::Supplied)
        }
        None => {
            let pi = correction.unmix(&plugin.tau_hat)?;
            let bad: Vec<usize> = (0..k).filter(|&g| pi[g] <= 0.0).collect();
            if !bad.is_empty() {
                return Err(ReportError::NonPositivePrior(bad));
            }
            (pi, PriorSource::Estimated)
        }
    };
    let inflation_factor = estimator::variance_inflation_factor_seeded(c, inputs.seed)?;
    let mut warnings = Vec::new();
    let corrected = if plugin.undefined_groups.is_empty() {
        let m = plugin.defined_m()?;
        Some(correction.correct(&plugin.tau_hat, &m, &prior)?)
    } else {
        warnings.push(format!(
            "no trials labelled as groups {:?}; correction skipped",
            plugin.undefined_groups
        ));
        None
    };
    let plugin_bias = corrected.as_ref().and_then(|corrected| {
        let outside: Vec<usize> = (0..k).filter(|&g| !(0.0..=1.0).contains(&corrected[g])).collect();
        if !outside.is_empty() {
            warnings.push(format!("corrected rates outside [0,1] for groups {outside:?}; clamped for the bias report"));
        }
        let clamped: Vec<f64> = corrected.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        match GroupModel::new(prior.clone(), clamped, c.clone())
            .map_err(|e| e.to_string())
            .and_then(|model| BiasReport::compute(&model).map_err(|e| e.to_string()))
        {
            Ok(b) => Some(b),
            Err(e) => {
                warnings.push(format!("plug-in bias not reported: {e}"));
                None
            }
        }
    });
    Ok(EstimatorBlock {
        trials: inputs.trials.len(),
        plugin,
        prior,
        prior_source,
        condition: correction.condition(),
        corrected,
        inflation_factor,
        plugin_bias,
        warnings,
    })
}

/// `table` must carry both true and predicted segments for every row.
pub fn build_audit(
    table: &SampleTable,
    taxonomy: &Taxonomy,
    min_images: u64,
    estimator: Option<EstimatorInputs<'_>>,
    provenance: Provenance,
) -> Result<AuditReport, ReportError> {
    let accuracy = accuracy_block(table, taxonomy)?;
    let fairness = fairness_block(table, taxonomy)?;
    let scores = metrics::robustness_scores(table, taxonomy, min_images)?;
    let estimator = estimator.map(estimator_block).transpose()?;
    Ok(AuditReport {
        format: AUDIT_FORMAT.into(),
        taxonomy: taxonomy.clone(),
        accuracy,
        fairness,
        robustness: RobustnessBlock { min_images, scores },
        estimator,
        provenance,
    })
}
