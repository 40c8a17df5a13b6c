//! Accuracy, fairness and robustness metrics.
//!
//! Robustness metrics look at how consistently a labeling function treats
//! the images of one identity: the per-identity predicted-label distribution
//! feeds the homogeneity entropy (HomE) and the two majority accuracies
//! (MaMA pools images, MiMA averages identities).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SampleTable, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("table has no rows")]
    EmptyTable,
    #[error("no rows for segments {0:?}")]
    EmptyGroup(Vec<usize>),
    #[error("mean of rates is zero")]
    ZeroMean,
    #[error("largest rate is zero, ratio undefined (difference {difference})")]
    ZeroMax { difference: f64 },
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("rate {index} = {value} outside the {scale:?} range")]
    RateOutOfRange { index: usize, value: f64, scale: RateScale },
    #[error("rate vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("row {row} ({image_id}) has no predicted segment")]
    MissingPrediction { row: usize, image_id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateKind {
    Accuracy,
    Fmr,
    Fnmr,
    Tpr,
    Fpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateScale {
    Unit,
    Percent,
}

impl RateScale {
    fn upper(self) -> f64 {
        match self {
            RateScale::Unit => 1.0,
            RateScale::Percent => 100.0,
        }
    }
}

/// Per-group rates of one kind, on a unit or percentage scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    rates: Vec<f64>,
    kind: RateKind,
    scale: RateScale,
}

impl GroupRates {
    pub fn new(rates: Vec<f64>, kind: RateKind, scale: RateScale) -> Result<Self, MetricsError> {
        if rates.len() < 2 {
            return Err(MetricsError::TooFewGroups(rates.len()));
        }
        let upper = scale.upper();
        if let Some((index, &value)) = rates.iter().enumerate().find(|(_, v)| !(0.0..=upper).contains(*v)) {
            return Err(MetricsError::RateOutOfRange { index, value, scale });
        }
        Ok(Self { rates, kind, scale })
    }

    pub fn unit(rates: Vec<f64>, kind: RateKind) -> Result<Self, MetricsError> {
        Self::new(rates, kind, RateScale::Unit)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn kind(&self) -> RateKind {
        self.kind
    }

    pub fn scale(&self) -> RateScale {
        self.scale
    }

    pub fn k(&self) -> usize {
        self.rates.len()
    }

    pub fn to_percent(&self) -> GroupRates {
        match self.scale {
            RateScale::Percent => self.clone(),
            RateScale::Unit => GroupRates {
                rates: self.rates.iter().map(|r| r * 100.0).collect(),
                kind: self.kind,
                scale: RateScale::Percent,
            },
        }
    }

    fn min_max(&self) -> (f64, f64) {
        self.rates
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }
}

pub fn micro_accuracy(table: &SampleTable) -> Result<f64, MetricsError> {
    if table.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let pairs = table.labeled_pairs()?;
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Accuracy restricted to rows of each true segment.
pub fn per_group_accuracy(table: &SampleTable, taxonomy: &Taxonomy) -> Result<GroupRates, MetricsError> {
    let k = taxonomy.k();
    let pairs = table.labeled_pairs()?;
    let mut totals = vec![0u64; k];
    let mut correct = vec![0u64; k];
    for (t, p) in pairs {
        totals[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&g| totals[g] == 0).collect();
    if !empty.is_empty() {
        return Err(MetricsError::EmptyGroup(empty));
    }
    let rates = correct.iter().zip(&totals).map(|(&c, &n)| c as f64 / n as f64).collect();
    GroupRates::unit(rates, RateKind::Accuracy)
}

/// One-vs-rest false positive rate per segment: P(pred = g | true ≠ g).
pub fn per_group_false_positive_rate(table: &SampleTable, taxonomy: &Taxonomy) -> Result<GroupRates, MetricsError> {
    let k = taxonomy.k();
    let pairs = table.labeled_pairs()?;
    let mut negatives = vec![0u64; k];
    let mut false_pos = vec![0u64; k];
    for (t, p) in pairs {
        for g in 0..k {
            if g != t {
                negatives[g] += 1;
                if p == g {
                    false_pos[g] += 1;
                }
            }
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&g| negatives[g] == 0).collect();
    if !empty.is_empty() {
        return Err(MetricsError::EmptyGroup(empty));
    }
    let rates = false_pos.iter().zip(&negatives).map(|(&f, &n)| f as f64 / n as f64).collect();
    GroupRates::unit(rates, RateKind::Fpr)
}

/// Population standard deviation of the rates, in the input scale.
pub fn degree_of_bias(rates: &GroupRates) -> f64 {
    let k = rates.k() as f64;
    let mean = rates.rates.iter().sum::<f64>() / k;
    (rates.rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt()
}

/// Mean-normalized spread: sqrt((1/K) Σ (1 − r_g/mean)²).
pub fn degree_of_bias_relative(rates: &GroupRates) -> Result<f64, MetricsError> {
    let k = rates.k() as f64;
    let mean = rates.rates.iter().sum::<f64>() / k;
    if mean <= 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    Ok((rates.rates.iter().map(|r| (1.0 - r / mean).powi(2)).sum::<f64>() / k).sqrt())
}

/// Max–min difference and min/max ratio of a rate vector. The ratio is
/// absent when the largest rate is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parity {
    pub difference: f64,
    pub ratio: Option<f64>,
}

impl Parity {
    pub fn ratio(&self) -> Result<f64, MetricsError> {
        self.ratio.ok_or(MetricsError::ZeroMax { difference: self.difference })
    }
}

pub fn demographic_parity(rates: &GroupRates) -> Parity {
    let (lo, hi) = rates.min_max();
    Parity { difference: hi - lo, ratio: (hi > 0.0).then(|| lo / hi) }
}

/// Worst difference and worst ratio over TPR and FPR parities. The ratio is
/// absent if either side's ratio is undefined.
pub fn equalized_odds(tpr: &GroupRates, fpr: &GroupRates) -> Result<Parity, MetricsError> {
    if tpr.k() != fpr.k() {
        return Err(MetricsError::LengthMismatch(tpr.k(), fpr.k()));
    }
    let a = demographic_parity(tpr);
    let b = demographic_parity(fpr);
    let ratio = match (a.ratio, b.ratio) {
        (Some(x), Some(y)) => Some(x.min(y)),
        _ => None,
    };
    Ok(Parity { difference: a.difference.max(b.difference), ratio })
}

/// Predicted-label counts of one identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityLabels {
    pub identity_id: String,
    pub counts: Vec<u64>,
}

impl IdentityLabels {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn distribution(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Entropy of the label distribution normalized by ln K.
    pub fn normalized_entropy(&self) -> f64 {
        let k = self.counts.len() as f64;
        let h: f64 = self
            .distribution()
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        h / k.ln()
    }
}

/// Per-identity predicted-label counts, ordered by identity id.
pub fn identity_label_counts(table: &SampleTable, taxonomy: &Taxonomy) -> Result<Vec<IdentityLabels>, MetricsError> {
    if table.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let k = taxonomy.k();
    let mut by_id: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (row, r) in table.rows().iter().enumerate() {
        let pred = r.predicted_segment.ok_or_else(|| MetricsError::MissingPrediction {
            row,
            image_id: r.image_id.clone(),
        })?;
        by_id.entry(r.identity_id.as_str()).or_insert_with(|| vec![0; k])[pred] += 1;
    }
    Ok(by_id
        .into_iter()
        .map(|(id, counts)| IdentityLabels { identity_id: id.to_string(), counts })
        .collect())
}

/// Relative frequency of each predicted label per identity.
pub fn label_distribution_per_identity(
    table: &SampleTable,
    taxonomy: &Taxonomy,
) -> Result<Vec<(String, Vec<f64>)>, MetricsError> {
    Ok(identity_label_counts(table, taxonomy)?
        .into_iter()
        .map(|il| {
            let d = il.distribution();
            (il.identity_id, d)
        })
        .collect())
}

pub fn homogeneity_entropy(table: &SampleTable, taxonomy: &Taxonomy) -> Result<f64, MetricsError> {
    Ok(robustness_scores(table, taxonomy, 1)?.home)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScores {
    pub home: f64,
    pub mama_raw: f64,
    pub mima_raw: f64,
    pub mama_norm: f64,
    pub mima_norm: f64,
    pub identities_used: usize,
}

pub fn majority_accuracies(table: &SampleTable, taxonomy: &Taxonomy) -> Result<RobustnessScores, MetricsError> {
    robustness_scores(table, taxonomy, 1)
}

/// All robustness scores over identities with at least `min_images` images.
pub fn robustness_scores(
    table: &SampleTable,
    taxonomy: &Taxonomy,
    min_images: u64,
) -> Result<RobustnessScores, MetricsError> {
    let identities: Vec<IdentityLabels> = identity_label_counts(table, taxonomy)?
        .into_iter()
        .filter(|il| il.total() >= min_images.max(1))
        .collect();
    scores_from_counts(&identities, taxonomy.k())
}

pub fn scores_from_counts(identities: &[IdentityLabels], k: usize) -> Result<RobustnessScores, MetricsError> {
    if identities.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    if k < 2 {
        return Err(MetricsError::TooFewGroups(k));
    }
    let d = identities.len() as f64;
    let mut entropy_sum = 0.0;
    let mut majority_sum = 0u64;
    let mut image_sum = 0u64;
    let mut fraction_sum = 0.0;
    for il in identities {
        let n = il.total();
        let top = il.max_count();
        entropy_sum += il.normalized_entropy();
        majority_sum += top;
        image_sum += n;
        fraction_sum += top as f64 / n as f64;
    }
    let mama_raw = majority_sum as f64 / image_sum as f64;
    let mima_raw = fraction_sum / d;
    Ok(RobustnessScores {
        home: (entropy_sum / d).clamp(0.0, 1.0),
        mama_raw,
        mima_raw,
        mama_norm: normalize_majority(mama_raw, k),
        mima_norm: normalize_majority(mima_raw, k),
        identities_used: identities.len(),
    })
}

/// Maps a majority accuracy from [1/K, 1] onto [0, 1].
pub fn normalize_majority(raw: f64, k: usize) -> f64 {
    let k = k as f64;
    ((raw - 1.0 / k) * k / (k - 1.0)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SampleRow;

    fn tax(k: usize) -> Taxonomy {
        Taxonomy::new("eth", (0..k).map(|i| format!("s{i}")).collect()).unwrap()
    }

    fn labeled(pairs: &[(usize, usize)]) -> SampleTable {
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
        SampleTable::new(rows, 4).unwrap()
    }

    fn identities(groups: &[&[usize]], k: usize) -> SampleTable {
        let mut rows = Vec::new();
        for (id, preds) in groups.iter().enumerate() {
            for &p in preds.iter() {
                rows.push(SampleRow {
                    image_id: format!("img{}", rows.len()),
                    identity_id: format!("id{id}"),
                    true_segment: None,
                    predicted_segment: Some(p),
                });
            }
        }
        SampleTable::new(rows, k).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn micro_accuracy_examples() {
        assert_eq!(micro_accuracy(&labeled(&[(0, 0), (1, 1), (2, 2), (3, 3)])).unwrap(), 1.0);
        assert_eq!(micro_accuracy(&labeled(&[(0, 0), (1, 1), (2, 2), (3, 0)])).unwrap(), 0.75);
        assert_eq!(micro_accuracy(&labeled(&[])), Err(MetricsError::EmptyTable));
    }

    #[test]
    fn per_group_accuracy_examples() {
        let t2 = tax(2);
        let rows = labeled(&[(0, 0), (0, 1), (1, 1), (1, 1)]);
        assert_eq!(per_group_accuracy(&rows, &t2).unwrap().rates(), &[0.5, 1.0]);
        let rows = labeled(&[(0, 0), (1, 1)]);
        assert_eq!(per_group_accuracy(&rows, &tax(3)), Err(MetricsError::EmptyGroup(vec![2])));
    }

    #[test]
    fn degree_of_bias_examples() {
        let eq = GroupRates::unit(vec![0.9; 4], RateKind::Accuracy).unwrap();
        assert!(degree_of_bias(&eq).abs() < 1e-15);
        let two = GroupRates::unit(vec![0.8, 1.0], RateKind::Accuracy).unwrap();
        assert!(close(degree_of_bias(&two), 0.1));
        assert!(close(degree_of_bias(&two.to_percent()), 10.0));
    }

    #[test]
    fn degree_of_bias_relative_examples() {
        let eq = GroupRates::unit(vec![0.3; 3], RateKind::Fmr).unwrap();
        assert!(degree_of_bias_relative(&eq).unwrap().abs() < 1e-15);
        let r = GroupRates::unit(vec![0.5, 1.0], RateKind::Fmr).unwrap();
        assert!(close(degree_of_bias_relative(&r).unwrap(), 1.0 / 3.0));
        let z = GroupRates::unit(vec![0.0, 0.0], RateKind::Fmr).unwrap();
        assert_eq!(degree_of_bias_relative(&z), Err(MetricsError::ZeroMean));
    }

    #[test]
    fn parity_examples() {
        let p = demographic_parity(&GroupRates::unit(vec![0.5, 1.0], RateKind::Accuracy).unwrap());
        assert_eq!((p.difference, p.ratio), (0.5, Some(0.5)));
        let p = demographic_parity(&GroupRates::unit(vec![0.6, 0.8, 0.9], RateKind::Accuracy).unwrap());
        assert!(close(p.difference, 0.3));
        assert!(close(p.ratio.unwrap(), 2.0 / 3.0));
        let p = demographic_parity(&GroupRates::unit(vec![0.7; 3], RateKind::Accuracy).unwrap());
        assert_eq!((p.difference, p.ratio), (0.0, Some(1.0)));
        let p = demographic_parity(&GroupRates::unit(vec![0.0, 0.0], RateKind::Fmr).unwrap());
        assert_eq!(p.ratio(), Err(MetricsError::ZeroMax { difference: 0.0 }));
    }

    #[test]
    fn equalized_odds_examples() {
        let tpr = GroupRates::unit(vec![0.9, 0.85], RateKind::Tpr).unwrap();
        let fpr = GroupRates::unit(vec![0.1, 0.1], RateKind::Fpr).unwrap();
        let eo = equalized_odds(&tpr, &fpr).unwrap();
        assert!(close(eo.difference, 0.05));
        assert!(close(eo.ratio.unwrap(), 0.85 / 0.9));

        let same = GroupRates::unit(vec![0.4, 0.4], RateKind::Tpr).unwrap();
        let eo = equalized_odds(&same, &same).unwrap();
        assert_eq!((eo.difference, eo.ratio), (0.0, Some(1.0)));

        let tpr = GroupRates::unit(vec![1.0, 1.0], RateKind::Tpr).unwrap();
        let fpr = GroupRates::unit(vec![0.0, 0.2], RateKind::Fpr).unwrap();
        let eo = equalized_odds(&tpr, &fpr).unwrap();
        assert!(close(eo.difference, 0.2));
        assert_eq!(eo.ratio, Some(0.0));

        let fpr = GroupRates::unit(vec![0.0, 0.0], RateKind::Fpr).unwrap();
        let eo = equalized_odds(&tpr, &fpr).unwrap();
        assert!(matches!(eo.ratio(), Err(MetricsError::ZeroMax { .. })));
    }

    #[test]
    fn label_distributions() {
        let t = identities(&[&[0, 0, 1], &[1]], 2);
        let d = label_distribution_per_identity(&t, &tax(2)).unwrap();
        assert!(close(d[0].1[0], 2.0 / 3.0) && close(d[0].1[1], 1.0 / 3.0));
        assert_eq!(d[1].1, vec![0.0, 1.0]);
    }

    #[test]
    fn homogeneity_examples() {
        let t = identities(&[&[0, 0, 0], &[1, 1], &[2]], 3);
        assert_eq!(homogeneity_entropy(&t, &tax(3)).unwrap(), 0.0);
        let t = identities(&[&[0, 0, 1, 1]], 2);
        assert!(close(homogeneity_entropy(&t, &tax(2)).unwrap(), 1.0));
        let t = identities(&[&[0, 0, 1], &[1, 1, 1, 1]], 2);
        let h3 = -(2.0f64 / 3.0) * (2.0f64 / 3.0).log2() - (1.0f64 / 3.0) * (1.0f64 / 3.0).log2();
        assert!(close(homogeneity_entropy(&t, &tax(2)).unwrap(), h3 / 2.0));
        assert!((h3 / 2.0 - 0.4591).abs() < 1e-4);
    }

    #[test]
    fn majority_examples() {
        let t = identities(&[&[0, 0], &[1]], 2);
        let s = majority_accuracies(&t, &tax(2)).unwrap();
        assert_eq!((s.mama_raw, s.mima_raw, s.mama_norm, s.mima_norm), (1.0, 1.0, 1.0, 1.0));

        let t = identities(&[&[0, 0, 1], &[1, 1, 1, 1]], 2);
        let s = majority_accuracies(&t, &tax(2)).unwrap();
        assert!(close(s.mama_raw, 6.0 / 7.0));
        assert!(close(s.mima_raw, 5.0 / 6.0));
        assert!(close(s.mama_norm, 5.0 / 7.0));
        assert!(close(s.mima_norm, 2.0 / 3.0));
        assert_eq!(s.identities_used, 2);

        let t = identities(&[&[0, 1, 2], &[2, 1, 0]], 3);
        let s = majority_accuracies(&t, &tax(3)).unwrap();
        assert!(close(s.mama_raw, 1.0 / 3.0) && close(s.mima_raw, 1.0 / 3.0));
        assert_eq!((s.mama_norm, s.mima_norm), (0.0, 0.0));
        assert!(close(s.home, 1.0));
    }

    #[test]
    fn min_images_filter_drops_singletons() {
        let t = identities(&[&[0, 1], &[1]], 2);
        let all = robustness_scores(&t, &tax(2), 1).unwrap();
        let multi = robustness_scores(&t, &tax(2), 2).unwrap();
        assert_eq!(all.identities_used, 2);
        assert_eq!(multi.identities_used, 1);
        assert!(close(multi.home, 1.0));
        assert!(close(all.home, 0.5));
    }

    #[test]
    fn missing_prediction_and_empty() {
        let rows = vec![SampleRow {
            image_id: "a".into(),
            identity_id: "i".into(),
            true_segment: Some(0),
            predicted_segment: None,
        }];
        let t = SampleTable::new(rows, 2).unwrap();
        assert!(matches!(homogeneity_entropy(&t, &tax(2)), Err(MetricsError::MissingPrediction { .. })));
        let empty = SampleTable::new(vec![], 2).unwrap();
        assert_eq!(homogeneity_entropy(&empty, &tax(2)), Err(MetricsError::EmptyTable));
    }

    #[test]
    fn false_positive_rates() {
        let t = labeled(&[(0, 0), (0, 1), (1, 1), (1, 1)]);
        let fpr = per_group_false_positive_rate(&t, &tax(2)).unwrap();
        assert_eq!(fpr.rates(), &[0.0, 0.5]);
    }
}
