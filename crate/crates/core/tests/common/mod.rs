#![allow(dead_code)]

use fairprobe::model::{ConfusionMatrix, GroupModel, SampleRow, SampleTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Flat-Dirichlet draw via normalized exponentials.
pub fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-stochastic matrix; `diag_mass` of each row is put on the diagonal
/// before adding a random simplex share of the rest.
pub fn confusion(rng: &mut ChaCha8Rng, k: usize, diag_mass: f64) -> ConfusionMatrix {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            let mut row: Vec<f64> = simplex(rng, k).into_iter().map(|v| v * (1.0 - diag_mass)).collect();
            row[a] += diag_mass;
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    ConfusionMatrix::from_rows(&rows).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize, diag_mass: f64) -> GroupModel {
    let pi = simplex(rng, k);
    let p = (0..k).map(|_| rng.random::<f64>()).collect();
    let c = confusion(rng, k, diag_mass);
    GroupModel::new(pi, p, c).unwrap()
}

pub fn hand_confusion() -> ConfusionMatrix {
    ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap()
}

pub fn hand_model() -> GroupModel {
    GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], hand_confusion()).unwrap()
}

pub fn near_singular_model() -> GroupModel {
    let c = ConfusionMatrix::from_rows(&[vec![0.51, 0.49], vec![0.49, 0.51]]).unwrap();
    GroupModel::new(vec![0.5, 0.5], vec![0.9, 0.7], c).unwrap()
}

/// Σ_a π_a c_ag p_a / Σ_a π_a c_ag, written out directly.
pub fn oracle_m(pi: &[f64], p: &[f64], c: &[Vec<f64>]) -> Vec<f64> {
    let k = pi.len();
    let mut out = vec![0.0; k];
    for g in 0..k {
        let mut num = 0.0;
        let mut den = 0.0;
        for a in 0..k {
            num += pi[a] * c[a][g] * p[a];
            den += pi[a] * c[a][g];
        }
        out[g] = num / den;
    }
    out
}

pub fn oracle_bias(pi: &[f64], p: &[f64], c: &[Vec<f64>]) -> Vec<f64> {
    let k = pi.len();
    (0..k)
        .map(|g| {
            let den: f64 = (0..k).map(|a| pi[a] * c[a][g]).sum();
            let num: f64 = (0..k).filter(|&a| a != g).map(|a| pi[a] * c[a][g] * (p[a] - p[g])).sum();
            num / den
        })
        .collect()
}

pub fn oracle_bound(pi: &[f64], p: &[f64], c: &[Vec<f64>]) -> Vec<Option<f64>> {
    let k = pi.len();
    (0..k)
        .map(|g| {
            let diag = pi[g] * c[g][g];
            if diag <= 0.0 {
                return None;
            }
            let delta = (0..k).filter(|&a| a != g).map(|a| (p[a] - p[g]).abs()).fold(0.0, f64::max);
            let off: f64 = (0..k).filter(|&a| a != g).map(|a| pi[a] * c[a][g]).sum();
            Some(delta * off / diag)
        })
        .collect()
}

pub fn rows_of(c: &ConfusionMatrix) -> Vec<Vec<f64>> {
    c.entries().to_rows()
}

/// Random table with every row carrying both labels.
pub fn random_table(rng: &mut ChaCha8Rng, rows: usize, identities: usize, k: usize) -> SampleTable {
    let rows = (0..rows)
        .map(|i| SampleRow {
            image_id: format!("img{i}"),
            identity_id: format!("p{}", rng.random_range(0..identities)),
            true_segment: Some(rng.random_range(0..k)),
            predicted_segment: Some(rng.random_range(0..k)),
        })
        .collect();
    SampleTable::new(rows, k).unwrap()
}

/// Per-identity predicted-label lists, grouped with plain vectors.
pub fn identity_label_lists(table: &SampleTable) -> Vec<Vec<usize>> {
    let mut ids: Vec<String> = Vec::new();
    let mut lists: Vec<Vec<usize>> = Vec::new();
    for r in table.rows() {
        let pos = match ids.iter().position(|x| *x == r.identity_id) {
            Some(p) => p,
            None => {
                ids.push(r.identity_id.clone());
                lists.push(Vec::new());
                ids.len() - 1
            }
        };
        lists[pos].push(r.predicted_segment.unwrap());
    }
    lists
}

pub struct BruteRobustness {
    pub home: f64,
    pub mama: f64,
    pub mima: f64,
}

pub fn brute_robustness(lists: &[Vec<usize>], k: usize) -> BruteRobustness {
    let mut entropy_sum = 0.0;
    let mut majority_total = 0usize;
    let mut images = 0usize;
    let mut fraction_sum = 0.0;
    for labels in lists {
        let n = labels.len();
        let mut best = 0usize;
        let mut h = 0.0;
        for s in 0..k {
            let count = labels.iter().filter(|&&l| l == s).count();
            best = best.max(count);
            if count > 0 {
                let q = count as f64 / n as f64;
                h -= q * q.ln();
            }
        }
        entropy_sum += h / (k as f64).ln();
        majority_total += best;
        images += n;
        fraction_sum += best as f64 / n as f64;
    }
    BruteRobustness {
        home: entropy_sum / lists.len() as f64,
        mama: majority_total as f64 / images as f64,
        mima: fraction_sum / lists.len() as f64,
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// XOR corners replicated `reps` times with uniform jitter in ±`jitter`.
pub fn jittered_xor(rng: &mut ChaCha8Rng, reps: usize, jitter: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let corners = [([0.0, 0.0], 0), ([1.0, 1.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1)];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..reps {
        for (c, l) in corners {
            x.push(c.iter().map(|v| v + jitter * (2.0 * rng.random::<f64>() - 1.0)).collect());
            y.push(l);
        }
    }
    (x, y)
}

/// Two 2D blobs at (±2, 0) with radius 0.5, so the margin exceeds 1.
pub fn separable_blobs(rng: &mut ChaCha8Rng, per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (label, cx) in [(0, -2.0), (1, 2.0)] {
        for _ in 0..per_class {
            let r = 0.5 * rng.random::<f64>().sqrt();
            let t = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            x.push(vec![cx + r * t.cos(), r * t.sin()]);
            y.push(label);
        }
    }
    (x, y)
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}
