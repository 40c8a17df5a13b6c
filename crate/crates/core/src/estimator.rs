//! Estimation of per-group success rates when group labels come from a noisy
//! attribute classifier with known confusion matrix C.
//!
//! With π the true-group prior and τ = Cᵀπ the distribution of observed
//! labels, the plug-in rate m̂_g (successes over identities *labeled* g)
//! converges to m_g = Σ_a π_a c_ag p_a / τ_g rather than to p_g. Inverting
//! Cᵀ on the observed numerator n = τ⊙m recovers π⊙p, which gives the
//! corrected estimator; the squared operator norm of (Cᵀ)⁻¹ bounds how much
//! that inversion inflates the covariance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Lu, Matrix, NormEstimate};
use crate::model::{group_counts, BinaryTrialTable, ConfusionMatrix, GroupCounts, GroupModel};

/// Estimated condition number above which C is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("trial table is empty")]
    EmptyTrials,
    #[error("groups {0:?} have no observed identities")]
    StrictModeEmptyGroup(Vec<usize>),
    #[error("tau is zero for groups {0:?}")]
    ZeroTau(Vec<usize>),
    #[error("pi_g * c_gg is zero for groups {0:?}")]
    DegenerateDiagonal(Vec<usize>),
    #[error("confusion matrix is singular or ill-conditioned (condition {condition:e})")]
    SingularConfusion { condition: f64 },
    #[error("prior is zero for groups {0:?}")]
    ZeroPrior(Vec<usize>),
    #[error("plug-in rate undefined for groups {0:?}")]
    UndefinedPlugin(Vec<usize>),
    #[error("vector has length {actual}, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-observed-group rates m̂, observed label shares τ̂ and n̂ = τ̂⊙m̂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginEstimate {
    pub m_hat: Vec<Option<f64>>,
    pub tau_hat: Vec<f64>,
    pub n_hat: Vec<Option<f64>>,
    pub undefined_groups: Vec<usize>,
}

impl PluginEstimate {
    pub fn from_counts(counts: &GroupCounts) -> Result<Self, EstimatorError> {
        let total = counts.total();
        if total == 0 {
            return Err(EstimatorError::EmptyTrials);
        }
        let k = counts.counts.len();
        let mut m_hat = Vec::with_capacity(k);
        let mut n_hat = Vec::with_capacity(k);
        let mut tau_hat = Vec::with_capacity(k);
        let mut undefined_groups = Vec::new();
        for g in 0..k {
            let n = counts.counts[g];
            let s = counts.successes[g];
            let tau = n as f64 / total as f64;
            tau_hat.push(tau);
            if n == 0 {
                undefined_groups.push(g);
                m_hat.push(None);
                n_hat.push(None);
            } else {
                let m = s as f64 / n as f64;
                m_hat.push(Some(m));
                n_hat.push(Some(tau * m));
            }
        }
        Ok(Self { m_hat, tau_hat, n_hat, undefined_groups })
    }

    /// m̂ with every group defined, or the list of undefined groups.
    pub fn defined_m(&self) -> Result<Vec<f64>, EstimatorError> {
        if !self.undefined_groups.is_empty() {
            return Err(EstimatorError::UndefinedPlugin(self.undefined_groups.clone()));
        }
        Ok(self.m_hat.iter().map(|m| m.expect("checked")).collect())
    }

    pub fn defined_n(&self) -> Result<Vec<f64>, EstimatorError> {
        if !self.undefined_groups.is_empty() {
            return Err(EstimatorError::UndefinedPlugin(self.undefined_groups.clone()));
        }
        Ok(self.n_hat.iter().map(|n| n.expect("checked")).collect())
    }
}

pub fn plugin_estimate(trials: &BinaryTrialTable, k: usize, strict: bool) -> Result<PluginEstimate, EstimatorError> {
    if trials.is_empty() {
        return Err(EstimatorError::EmptyTrials);
    }
    let est = PluginEstimate::from_counts(&group_counts(trials, k))?;
    if strict && !est.undefined_groups.is_empty() {
        return Err(EstimatorError::StrictModeEmptyGroup(est.undefined_groups));
    }
    Ok(est)
}

/// Σ_a π_a c_ag, the observed-label share of group g.
fn column_mass(model: &GroupModel, g: usize) -> f64 {
    let c = model.confusion();
    (0..model.k()).map(|a| model.pi()[a] * c.get(a, g)).sum()
}

/// Population limit of the plug-in estimator.
pub fn population_m(model: &GroupModel) -> Result<Vec<f64>, EstimatorError> {
    let k = model.k();
    let c = model.confusion();
    let zero: Vec<usize> = (0..k).filter(|&g| column_mass(model, g) <= 0.0).collect();
    if !zero.is_empty() {
        return Err(EstimatorError::ZeroTau(zero));
    }
    Ok((0..k)
        .map(|g| {
            let num: f64 = (0..k).map(|a| model.pi()[a] * c.get(a, g) * model.p()[a]).sum();
            num / column_mass(model, g)
        })
        .collect())
}

/// Bias of the plug-in limit and its bound per group. Bound entries are
/// `None` where π_g c_gg = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub m: Vec<f64>,
    pub bias: Vec<f64>,
    pub bound: Vec<Option<f64>>,
    pub delta_max: Vec<f64>,
}

impl BiasReport {
    /// Like [`bias_and_bound`] but tolerates groups with π_g c_gg = 0.
    pub fn compute(model: &GroupModel) -> Result<Self, EstimatorError> {
        let k = model.k();
        let c = model.confusion();
        let pi = model.pi();
        let p = model.p();
        let m = population_m(model)?;
        let mut bias = Vec::with_capacity(k);
        let mut bound = Vec::with_capacity(k);
        let mut delta_max = Vec::with_capacity(k);
        for g in 0..k {
            let mass = column_mass(model, g);
            let off_mass: f64 = (0..k).filter(|&a| a != g).map(|a| pi[a] * c.get(a, g)).sum();
            let off_num: f64 = (0..k)
                .filter(|&a| a != g)
                .map(|a| pi[a] * c.get(a, g) * (p[a] - p[g]))
                .sum();
            bias.push(off_num / mass);
            let delta = (0..k)
                .filter(|&a| a != g)
                .map(|a| (p[a] - p[g]).abs())
                .fold(0.0, f64::max);
            delta_max.push(delta);
            let diag = pi[g] * c.get(g, g);
            bound.push((diag > 0.0).then(|| delta * off_mass / diag));
        }
        Ok(Self { m, bias, bound, delta_max })
    }

    pub fn degenerate_groups(&self) -> Vec<usize> {
        self.bound.iter().enumerate().filter(|(_, b)| b.is_none()).map(|(g, _)| g).collect()
    }
}

pub fn bias_and_bound(model: &GroupModel) -> Result<BiasReport, EstimatorError> {
    let report = BiasReport::compute(model)?;
    let degenerate = report.degenerate_groups();
    if !degenerate.is_empty() {
        return Err(EstimatorError::DegenerateDiagonal(degenerate));
    }
    Ok(report)
}

/// Factored Cᵀ, reused across repeated corrections.
#[derive(Debug, Clone)]
pub struct Correction {
    lu: Lu,
    condition: f64,
}

impl Correction {
    pub fn new(c: &ConfusionMatrix) -> Result<Self, EstimatorError> {
        let lu = match Lu::factor(&c.transpose()) {
            Ok(lu) => lu,
            Err(LinalgError::SingularMatrix { .. }) => {
                return Err(EstimatorError::SingularConfusion { condition: f64::INFINITY })
            }
            Err(e) => return Err(e.into()),
        };
        let condition = lu.condition();
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(EstimatorError::SingularConfusion { condition });
        }
        Ok(Self { lu, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn k(&self) -> usize {
        self.lu.dim()
    }

    /// Solves Cᵀ x = n, i.e. the corrected estimate of π⊙p.
    pub fn unmix(&self, n: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        self.check_len(n.len())?;
        Ok(self.lu.solve(n)?)
    }

    pub fn correct(&self, tau_hat: &[f64], m_hat: &[f64], pi: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        self.check_len(tau_hat.len())?;
        self.check_len(m_hat.len())?;
        self.check_len(pi.len())?;
        let zero: Vec<usize> = (0..pi.len()).filter(|&g| pi[g] <= 0.0).collect();
        if !zero.is_empty() {
            return Err(EstimatorError::ZeroPrior(zero));
        }
        let n: Vec<f64> = tau_hat.iter().zip(m_hat).map(|(t, m)| t * m).collect();
        let x = self.unmix(&n)?;
        Ok(x.iter().zip(pi).map(|(x, p)| x / p).collect())
    }

    pub fn inverse_transpose(&self) -> Matrix {
        self.lu.inverse()
    }

    fn check_len(&self, n: usize) -> Result<(), EstimatorError> {
        if n != self.k() {
            return Err(EstimatorError::LengthMismatch { expected: self.k(), actual: n });
        }
        Ok(())
    }
}

/// (Cᵀ)⁻¹(τ̂⊙m̂)/π, elementwise division by the caller-supplied prior.
pub fn corrected_estimator(
    c: &ConfusionMatrix,
    tau_hat: &[f64],
    m_hat: &[f64],
    pi: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    Correction::new(c)?.correct(tau_hat, m_hat, pi)
}

/// Corrected estimator applied to a plug-in estimate.
pub fn corrected_from_plugin(
    c: &ConfusionMatrix,
    plugin: &PluginEstimate,
    pi: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    let m = plugin.defined_m()?;
    corrected_estimator(c, &plugin.tau_hat, &m, pi)
}

/// Prior implied by observed label shares, π̂ = (Cᵀ)⁻¹τ̂. Not part of the
/// correction itself; offered for callers with no independent prior.
pub fn estimate_prior(c: &ConfusionMatrix, tau_hat: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    Correction::new(c)?.unmix(tau_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationFactor {
    pub value: f64,
    pub norm: NormEstimate,
}

/// ‖(Cᵀ)⁻¹‖²_op.
pub fn variance_inflation_factor(c: &ConfusionMatrix) -> Result<InflationFactor, EstimatorError> {
    variance_inflation_factor_seeded(c, linalg::DEFAULT_POWER_SEED)
}

/// As [`variance_inflation_factor`] with an explicit power-iteration seed.
pub fn variance_inflation_factor_seeded(c: &ConfusionMatrix, seed: u64) -> Result<InflationFactor, EstimatorError> {
    let inv = Correction::new(c)?.inverse_transpose();
    let norm = linalg::operator_norm_seeded(&inv, seed)?;
    Ok(InflationFactor { value: norm.value * norm.value, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BinaryTrial;

    fn hand_model() -> GroupModel {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap()
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
    fn plugin_examples() {
        let est = plugin_estimate(&trials(&[true, false, true], &[0, 0, 1]), 2, false).unwrap();
        assert_eq!(est.m_hat, vec![Some(0.5), Some(1.0)]);
        assert!((est.tau_hat[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((est.tau_hat[1] - 1.0 / 3.0).abs() < 1e-15);

        let est = plugin_estimate(&trials(&[true, true], &[0, 1]), 2, false).unwrap();
        assert_eq!(est.m_hat, vec![Some(1.0), Some(1.0)]);

        let est = plugin_estimate(&trials(&[true, false], &[0, 0]), 2, false).unwrap();
        assert_eq!(est.undefined_groups, vec![1]);
        assert_eq!(est.m_hat[1], None);
        assert!(matches!(est.defined_m(), Err(EstimatorError::UndefinedPlugin(_))));
        assert_eq!(
            plugin_estimate(&trials(&[true, false], &[0, 0]), 2, true),
            Err(EstimatorError::StrictModeEmptyGroup(vec![1]))
        );
        assert_eq!(plugin_estimate(&trials(&[], &[]), 2, false), Err(EstimatorError::EmptyTrials));
    }

    #[test]
    fn population_m_examples() {
        let id = GroupModel::new(vec![0.3, 0.7], vec![0.6, 0.2], ConfusionMatrix::identity(2)).unwrap();
        for (v, p) in population_m(&id).unwrap().iter().zip([0.6, 0.2]) {
            assert!((v - p).abs() < 1e-15);
        }
        let m = population_m(&hand_model()).unwrap();
        assert!((m[0] - 0.88).abs() < 1e-14 && (m[1] - 0.72).abs() < 1e-14);
        let c = ConfusionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap();
        let flat = GroupModel::new(vec![0.4, 0.6], vec![0.35, 0.35], c).unwrap();
        for v in population_m(&flat).unwrap() {
            assert!((v - 0.35).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_tau_is_reported() {
        let c = ConfusionMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let m = GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap();
        assert_eq!(population_m(&m), Err(EstimatorError::ZeroTau(vec![1])));
    }

    #[test]
    fn bias_examples() {
        let id = GroupModel::new(vec![0.3, 0.7], vec![0.6, 0.2], ConfusionMatrix::identity(2)).unwrap();
        let r = bias_and_bound(&id).unwrap();
        assert_eq!(r.bias, vec![0.0, 0.0]);
        assert_eq!(r.bound, vec![Some(0.0), Some(0.0)]);

        let r = bias_and_bound(&hand_model()).unwrap();
        assert!((r.bias[0] + 0.02).abs() < 1e-14);
        assert!((r.bias[1] - 0.02).abs() < 1e-14);
        let b0 = r.bound[0].unwrap();
        assert!((b0 - 0.2 * 0.05 / 0.45).abs() < 1e-14);
        assert!(b0 >= r.bias[0].abs());
        assert!(r.delta_max.iter().all(|d| (d - 0.2).abs() < 1e-15));
    }

    #[test]
    fn degenerate_diagonal() {
        let c = ConfusionMatrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let m = GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap();
        assert_eq!(bias_and_bound(&m), Err(EstimatorError::DegenerateDiagonal(vec![0])));
        let partial = BiasReport::compute(&m).unwrap();
        assert!(partial.bound[0].is_none() && partial.bound[1].is_some());
    }

    #[test]
    fn corrected_examples() {
        let pi = [0.2, 0.3, 0.5];
        let p = [0.4, 0.8, 0.6];
        let tau_m: Vec<f64> = pi.iter().zip(&p).map(|(a, b)| a * b).collect();
        let got = corrected_estimator(&ConfusionMatrix::identity(3), &[1.0; 3], &tau_m, &pi).unwrap();
        for (g, e) in got.iter().zip(&p) {
            assert!((g - e).abs() < 1e-15);
        }

        let model = hand_model();
        let m = population_m(&model).unwrap();
        let got = corrected_estimator(model.confusion(), model.tau(), &m, model.pi()).unwrap();
        assert!((got[0] - 0.9).abs() < 1e-12 && (got[1] - 0.7).abs() < 1e-12);

        let eq = ConfusionMatrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert!(matches!(
            corrected_estimator(&eq, &[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]),
            Err(EstimatorError::SingularConfusion { .. })
        ));
        assert_eq!(
            corrected_estimator(&ConfusionMatrix::identity(2), &[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0]),
            Err(EstimatorError::ZeroPrior(vec![1]))
        );
    }

    #[test]
    fn ill_conditioned_confusion_rejected() {
        let eps = 1e-13;
        let c = ConfusionMatrix::from_rows(&[vec![0.5 + eps, 0.5 - eps], vec![0.5 - eps, 0.5 + eps]]).unwrap();
        assert!(matches!(Correction::new(&c), Err(EstimatorError::SingularConfusion { .. })));
    }

    #[test]
    fn prior_recovered_from_tau() {
        let model = hand_model();
        let pi = estimate_prior(model.confusion(), model.tau()).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14 && (pi[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn inflation_examples() {
        let id = variance_inflation_factor(&ConfusionMatrix::identity(3)).unwrap();
        assert!((id.value - 1.0).abs() < 1e-12);
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        assert!((variance_inflation_factor(&c).unwrap().value - 1.5625).abs() < 1e-9);
        let near = ConfusionMatrix::from_rows(&[vec![0.51, 0.49], vec![0.49, 0.51]]).unwrap();
        assert!((variance_inflation_factor(&near).unwrap().value - 2500.0).abs() < 1e-5);
        let half = ConfusionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(variance_inflation_factor(&half), Err(EstimatorError::SingularConfusion { .. })));
    }
}
