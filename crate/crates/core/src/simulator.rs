//! Monte Carlo checks of the plug-in limit, its bias bound, and the
//! confusion-corrected estimator.
//!
//! Every replication draws identities independently: the true group from
//! π, the success indicator from p of that group, and the observed label from
//! the matching row of C, the last two independently given the true group.
//! Replication `r` owns the ChaCha stream `r` of the configured seed, so
//! results do not depend on how replications are scheduled across threads;
//! they are reduced in index order with pairwise summation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{self, BiasReport, Correction, EstimatorError, PluginEstimate};
use crate::linalg::{self, Matrix};
use crate::model::{BinaryTrial, BinaryTrialTable, GroupCounts, GroupModel};

/// Fraction of replications that may be dropped for empty groups.
pub const MAX_DROPPED_FRACTION: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("identities_per_run must be ≥ 1")]
    NoIdentities,
    #[error("replications must be ≥ 1")]
    NoReplications,
    #[error("{dropped} of {total} replications left a group empty")]
    UndefinedPlugin { dropped: usize, total: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

fn default_se_multiplier() -> f64 {
    4.0
}

fn default_cov_slack() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    #[serde(default = "default_se_multiplier")]
    pub se_multiplier: f64,
    #[serde(default = "default_cov_slack")]
    pub cov_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { se_multiplier: default_se_multiplier(), cov_slack: default_cov_slack() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimConfigRaw")]
pub struct SimConfig {
    pub model: GroupModel,
    pub identities_per_run: u64,
    pub replications: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
}

#[derive(Deserialize)]
struct SimConfigRaw {
    model: GroupModel,
    identities_per_run: u64,
    replications: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    tolerances: Tolerances,
}

impl TryFrom<SimConfigRaw> for SimConfig {
    type Error = SimError;
    fn try_from(raw: SimConfigRaw) -> Result<Self, Self::Error> {
        SimConfig::new(raw.model, raw.identities_per_run, raw.replications, raw.seed)
            .map(|c| c.with_tolerances(raw.tolerances))
    }
}

impl SimConfig {
    pub fn new(model: GroupModel, identities_per_run: u64, replications: usize, seed: u64) -> Result<Self, SimError> {
        if identities_per_run == 0 {
            return Err(SimError::NoIdentities);
        }
        if replications == 0 {
            return Err(SimError::NoReplications);
        }
        Ok(Self { model, identities_per_run, replications, seed, tolerances: Tolerances::default() })
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }
}

/// Generator for replication `r` of a run seeded with `seed`.
pub fn replication_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// Inverse-CDF sampler over the model's stored row order.
#[derive(Debug, Clone)]
struct Sampler {
    prior: Vec<f64>,
    rows: Vec<Vec<f64>>,
    p: Vec<f64>,
    prior_last: usize,
    row_last: Vec<usize>,
}

impl Sampler {
    fn new(model: &GroupModel) -> Self {
        let c = model.confusion();
        let rows: Vec<Vec<f64>> = (0..model.k()).map(|a| cumulative(c.entries().row(a))).collect();
        Self {
            prior: cumulative(model.pi()),
            row_last: (0..model.k()).map(|a| last_positive(c.entries().row(a))).collect(),
            rows,
            p: model.p().to_vec(),
            prior_last: last_positive(model.pi()),
        }
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, bool, usize) {
        let g = pick(&self.prior, self.prior_last, rng.random::<f64>());
        let y = rng.random::<f64>() < self.p[g];
        let g_hat = pick(&self.rows[g], self.row_last[g], rng.random::<f64>());
        (g, y, g_hat)
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

fn last_positive(weights: &[f64]) -> usize {
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[inline]
fn pick(cdf: &[f64], fallback: usize, u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(fallback)
}

/// Draws one table of `identities` trials, recording the latent group.
pub fn sample_run(model: &GroupModel, identities: u64, seed: u64) -> BinaryTrialTable {
    let sampler = Sampler::new(model);
    let mut rng = replication_rng(seed, 0);
    let rows = (0..identities)
        .map(|i| {
            let (g, y, g_hat) = sampler.draw(&mut rng);
            BinaryTrial { identity_id: format!("id{i}"), y, g_true: Some(g), g_hat }
        })
        .collect();
    BinaryTrialTable::new(rows, model.k()).expect("sampled indices are in range")
}

/// Observed-group counts of one replication, without materializing rows.
/// Replication 0 agrees with [`sample_run`] under the same seed.
pub fn replicate_counts(model: &GroupModel, identities: u64, seed: u64, r: u64) -> GroupCounts {
    let sampler = Sampler::new(model);
    let mut rng = replication_rng(seed, r);
    let mut counts = GroupCounts::zeros(model.k());
    for _ in 0..identities {
        let (_, y, g_hat) = sampler.draw(&mut rng);
        counts.record(g_hat, y);
    }
    counts
}

/// Pairwise (tree) summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

fn sample_variance(values: &[f64], mu: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mu).powi(2)).collect();
    pairwise_sum(&dev) / (values.len() - 1) as f64
}

/// Sample covariance of row vectors.
pub fn covariance(samples: &[Vec<f64>]) -> Matrix {
    let k = samples.first().map_or(0, Vec::len);
    let n = samples.len();
    let mus: Vec<f64> = (0..k).map(|i| mean(&samples.iter().map(|s| s[i]).collect::<Vec<_>>())).collect();
    let mut cov = Matrix::zeros(k, k);
    if n < 2 {
        return cov;
    }
    for i in 0..k {
        for j in i..k {
            let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mus[i]) * (s[j] - mus[j])).collect();
            let v = pairwise_sum(&prods) / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: usize,
    pub p: f64,
    pub m_population: f64,
    pub mean_m_hat: f64,
    pub var_m_hat: f64,
    pub se_m_hat: f64,
    pub bias_closed_form: f64,
    pub bias_empirical: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedStats {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Covariance of the pre-division corrected vector (Cᵀ)⁻¹n̂.
    pub covariance_corrected: Matrix,
    pub covariance_n: Matrix,
    pub norm_corrected: f64,
    pub norm_n: f64,
    pub inflation_factor: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub prop1_ok: bool,
    pub bound_ok: bool,
    pub prop2_unbiased_ok: Option<bool>,
    pub prop2_variance_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub k: usize,
    pub identities_per_run: u64,
    pub replications: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub replications_used: usize,
    pub replications_dropped: usize,
    pub groups: Vec<GroupStats>,
    pub corrected: Option<CorrectedStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_skipped: Option<String>,
    pub verdicts: Verdicts,
}

/// Per-replication plug-in estimates in replication order; dropped
/// replications (some group empty) are counted, not returned.
fn run_replications(config: &SimConfig) -> Result<(Vec<PluginEstimate>, usize), SimError> {
    let model = &config.model;
    let outcomes: Vec<PluginEstimate> = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| {
            let counts = replicate_counts(model, config.identities_per_run, config.seed, r);
            PluginEstimate::from_counts(&counts).expect("identities_per_run ≥ 1")
        })
        .collect();
    let total = outcomes.len();
    let used: Vec<PluginEstimate> = outcomes.into_iter().filter(|e| e.undefined_groups.is_empty()).collect();
    let dropped = total - used.len();
    if used.is_empty() || dropped as f64 > MAX_DROPPED_FRACTION * total as f64 {
        return Err(SimError::UndefinedPlugin { dropped, total });
    }
    Ok((used, dropped))
}

fn group_stats(config: &SimConfig, bias: &BiasReport, used: &[PluginEstimate]) -> Vec<GroupStats> {
    let model = &config.model;
    (0..model.k())
        .map(|g| {
            let values: Vec<f64> = used.iter().map(|e| e.m_hat[g].expect("defined")).collect();
            let mu = mean(&values);
            let var = sample_variance(&values, mu);
            GroupStats {
                group: g,
                p: model.p()[g],
                m_population: bias.m[g],
                mean_m_hat: mu,
                var_m_hat: var,
                se_m_hat: (var / values.len() as f64).sqrt(),
                bias_closed_form: bias.bias[g],
                bias_empirical: mu - model.p()[g],
                bound: bias.bound[g],
            }
        })
        .collect()
}

fn prop1_verdicts(config: &SimConfig, groups: &[GroupStats]) -> (bool, bool) {
    let mult = config.tolerances.se_multiplier;
    let prop1_ok = groups
        .iter()
        .all(|s| (s.mean_m_hat - s.m_population).abs() <= mult * s.se_m_hat);
    let bound_ok = groups
        .iter()
        .all(|s| s.bound.is_none_or(|b| (s.m_population - s.p).abs() <= b));
    (prop1_ok, bound_ok)
}

fn corrected_stats(
    config: &SimConfig,
    correction: &Correction,
    used: &[PluginEstimate],
) -> Result<CorrectedStats, SimError> {
    let model = &config.model;
    let k = model.k();
    let mut n_samples = Vec::with_capacity(used.len());
    let mut x_samples = Vec::with_capacity(used.len());
    for e in used {
        let n = e.defined_n()?;
        x_samples.push(correction.unmix(&n)?);
        n_samples.push(n);
    }
    let p_corr: Vec<Vec<f64>> = x_samples
        .iter()
        .map(|x| x.iter().zip(model.pi()).map(|(v, p)| v / p).collect())
        .collect();
    let mut means = Vec::with_capacity(k);
    let mut ses = Vec::with_capacity(k);
    for g in 0..k {
        let column: Vec<f64> = p_corr.iter().map(|v| v[g]).collect();
        let mu = mean(&column);
        means.push(mu);
        ses.push((sample_variance(&column, mu) / column.len() as f64).sqrt());
    }
    let covariance_corrected = covariance(&x_samples);
    let covariance_n = covariance(&n_samples);
    let norm_corrected = linalg::operator_norm(&covariance_corrected).map_err(EstimatorError::from)?.value;
    let norm_n = linalg::operator_norm(&covariance_n).map_err(EstimatorError::from)?.value;
    let inflation = estimator::variance_inflation_factor(model.confusion())?;
    Ok(CorrectedStats {
        mean: means,
        se: ses,
        covariance_corrected,
        covariance_n,
        norm_corrected,
        norm_n,
        inflation_factor: inflation.value,
        condition: correction.condition(),
    })
}

fn prop2_verdicts(config: &SimConfig, stats: &CorrectedStats) -> (bool, bool) {
    let mult = config.tolerances.se_multiplier;
    let unbiased = stats
        .mean
        .iter()
        .zip(&stats.se)
        .zip(config.model.p())
        .all(|((mu, se), p)| (mu - p).abs() <= mult * se);
    let variance = stats.norm_corrected
        <= (1.0 + config.tolerances.cov_slack) * stats.inflation_factor * stats.norm_n;
    (unbiased, variance)
}

fn base_report(config: &SimConfig, used: usize, dropped: usize, groups: Vec<GroupStats>) -> SimReport {
    let (prop1_ok, bound_ok) = prop1_verdicts(config, &groups);
    SimReport {
        k: config.model.k(),
        identities_per_run: config.identities_per_run,
        replications: config.replications,
        seed: config.seed,
        tolerances: config.tolerances,
        replications_used: used,
        replications_dropped: dropped,
        groups,
        corrected: None,
        corrected_skipped: None,
        verdicts: Verdicts { prop1_ok, bound_ok, prop2_unbiased_ok: None, prop2_variance_ok: None },
    }
}

/// Checks concentration of m̂ on the population limit and the bias bound.
pub fn verify_prop1(config: &SimConfig) -> Result<SimReport, SimError> {
    let bias = estimator::bias_and_bound(&config.model)?;
    let (used, dropped) = run_replications(config)?;
    let groups = group_stats(config, &bias, &used);
    Ok(base_report(config, used.len(), dropped, groups))
}

/// Checks unbiasedness of the corrected estimator and the covariance
/// inflation bound; also fills the plug-in statistics.
pub fn verify_prop2(config: &SimConfig) -> Result<SimReport, SimError> {
    let correction = Correction::new(config.model.confusion())?;
    let zero: Vec<usize> = (0..config.model.k()).filter(|&g| config.model.pi()[g] <= 0.0).collect();
    if !zero.is_empty() {
        return Err(EstimatorError::ZeroPrior(zero).into());
    }
    let bias = BiasReport::compute(&config.model)?;
    let (used, dropped) = run_replications(config)?;
    let groups = group_stats(config, &bias, &used);
    let stats = corrected_stats(config, &correction, &used)?;
    let mut report = base_report(config, used.len(), dropped, groups);
    let (unbiased, variance) = prop2_verdicts(config, &stats);
    report.verdicts.prop2_unbiased_ok = Some(unbiased);
    report.verdicts.prop2_variance_ok = Some(variance);
    report.corrected = Some(stats);
    Ok(report)
}

/// Runs the corrected-estimator checks when C is invertible and π > 0,
/// otherwise only the plug-in checks (with the reason recorded).
pub fn simulate(config: &SimConfig) -> Result<SimReport, SimError> {
    let skip = match Correction::new(config.model.confusion()) {
        Err(e) => Some(e.to_string()),
        Ok(_) if config.model.pi().iter().any(|&p| p <= 0.0) => Some("prior has zero entries".to_string()),
        Ok(_) => None,
    };
    match skip {
        None => verify_prop2(config),
        Some(reason) => {
            let mut report = verify_prop1(config)?;
            report.corrected_skipped = Some(reason);
            Ok(report)
        }
    }
}

/// One row per (config, group), for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_index: usize,
    pub group: usize,
    pub identities_per_run: u64,
    pub replications_used: usize,
    pub p: f64,
    pub m_population: f64,
    pub mean_m_hat: f64,
    pub se_m_hat: f64,
    pub bias_closed_form: f64,
    pub bias_empirical: f64,
    pub bound: Option<f64>,
    pub mean_p_corrected: Option<f64>,
    pub se_p_corrected: Option<f64>,
    pub inflation_factor: Option<f64>,
}

impl SimReport {
    pub fn result_rows(&self, config_index: usize) -> Vec<ResultRow> {
        self.groups
            .iter()
            .map(|s| ResultRow {
                config_index,
                group: s.group,
                identities_per_run: self.identities_per_run,
                replications_used: self.replications_used,
                p: s.p,
                m_population: s.m_population,
                mean_m_hat: s.mean_m_hat,
                se_m_hat: s.se_m_hat,
                bias_closed_form: s.bias_closed_form,
                bias_empirical: s.bias_empirical,
                bound: s.bound,
                mean_p_corrected: self.corrected.as_ref().map(|c| c.mean[s.group]),
                se_p_corrected: self.corrected.as_ref().map(|c| c.se[s.group]),
                inflation_factor: self.corrected.as_ref().map(|c| c.inflation_factor),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<SimReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub entries: Vec<SweepEntry>,
    pub rows: Vec<ResultRow>,
}

/// Simulates each config in order; a failing config is recorded and the
/// sweep continues.
pub fn sweep(configs: &[SimConfig]) -> SweepOutput {
    let mut entries = Vec::with_capacity(configs.len());
    let mut rows = Vec::new();
    for (index, config) in configs.iter().enumerate() {
        match simulate(config) {
            Ok(report) => {
                rows.extend(report.result_rows(index));
                entries.push(SweepEntry { index, report: Some(report), error: None });
            }
            Err(e) => entries.push(SweepEntry { index, report: None, error: Some(e.to_string()) }),
        }
    }
    SweepOutput { entries, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{group_counts, ConfusionMatrix};

    fn hand_model() -> GroupModel {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap()
    }

    #[test]
    fn identity_confusion_copies_true_group() {
        let m = GroupModel::new(vec![0.2, 0.3, 0.5], vec![0.5, 0.5, 0.5], ConfusionMatrix::identity(3)).unwrap();
        for r in sample_run(&m, 500, 3).rows() {
            assert_eq!(Some(r.g_hat), r.g_true);
        }
    }

    #[test]
    fn certain_success_gives_all_ones() {
        let m = GroupModel::new(vec![0.5, 0.5], vec![1.0, 1.0], ConfusionMatrix::identity(2)).unwrap();
        assert!(sample_run(&m, 300, 9).rows().iter().all(|r| r.y));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        assert_eq!(sample_run(&hand_model(), 200, 42), sample_run(&hand_model(), 200, 42));
        assert_ne!(sample_run(&hand_model(), 200, 42), sample_run(&hand_model(), 200, 43));
    }

    #[test]
    fn streaming_counts_match_table() {
        let m = hand_model();
        let table = sample_run(&m, 1000, 5);
        assert_eq!(group_counts(&table, 2), replicate_counts(&m, 1000, 5, 0));
    }

    #[test]
    fn zero_probability_categories_never_drawn() {
        let c = ConfusionMatrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]])
            .unwrap();
        let m = GroupModel::new(vec![0.5, 0.0, 0.5], vec![0.5; 3], c).unwrap();
        for r in sample_run(&m, 2000, 1).rows() {
            assert_ne!(r.g_true, Some(1));
            assert_ne!(r.g_hat, 0);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn covariance_of_known_samples() {
        let s = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]];
        let c = covariance(&s);
        assert_eq!(c.to_rows(), vec![vec![4.0, 8.0], vec![8.0, 16.0]]);
    }

    #[test]
    fn config_validation_and_defaults() {
        assert_eq!(SimConfig::new(hand_model(), 0, 1, 0), Err(SimError::NoIdentities));
        assert_eq!(SimConfig::new(hand_model(), 1, 0, 0), Err(SimError::NoReplications));
        let json = r#"{"model":{"pi":[0.5,0.5],"p":[0.9,0.7],"confusion":{"entries":[[0.9,0.1],[0.1,0.9]]}},
                       "identities_per_run":100,"replications":3}"#;
        let cfg: SimConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.tolerances, Tolerances::default());
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn small_run_report_is_deterministic() {
        let cfg = SimConfig::new(hand_model(), 2000, 8, 11).unwrap();
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.corrected.is_some());
        assert_eq!(a.replications_used, 8);
    }

    #[test]
    fn degenerate_diagonal_propagates() {
        let c = ConfusionMatrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let m = GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap();
        let cfg = SimConfig::new(m, 100, 2, 0).unwrap();
        assert!(matches!(
            verify_prop1(&cfg),
            Err(SimError::Estimator(EstimatorError::DegenerateDiagonal(_)))
        ));
    }

    #[test]
    fn too_many_empty_groups_fail() {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let m = GroupModel::new(vec![0.99, 0.01], vec![0.5, 0.5], c).unwrap();
        let cfg = SimConfig::new(m, 2, 20, 0).unwrap();
        assert!(matches!(verify_prop2(&cfg), Err(SimError::UndefinedPlugin { .. })));
    }

    #[test]
    fn singular_confusion_skips_correction() {
        let c = ConfusionMatrix::from_rows(&[vec![0.6, 0.4], vec![0.6, 0.4]]).unwrap();
        let m = GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap();
        let cfg = SimConfig::new(m, 500, 4, 0).unwrap();
        let report = simulate(&cfg).unwrap();
        assert!(report.corrected.is_none());
        assert!(report.corrected_skipped.is_some());
        assert!(matches!(
            verify_prop2(&cfg),
            Err(SimError::Estimator(EstimatorError::SingularConfusion { .. }))
        ));
    }

    #[test]
    fn empty_sweep() {
        let out = sweep(&[]);
        assert!(out.entries.is_empty() && out.rows.is_empty());
    }
}
