//! Per-neuron relevance scores and rankings.
//!
//! Every scorer reads training rows only. Rankings sort by descending score
//! with ties broken by ascending neuron index; mean difference ranks by the
//! absolute value of its signed score.

mod mutual_info;

pub use mutual_info::{mutual_information_column, DEFAULT_MI_NEIGHBORS};

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::probe::{train_logistic, TrainConfig};
use crate::serde_float;
use crate::store::ProbeTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MeanDiff,
    FStat,
    MutualInfo,
    L1Logistic,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::MeanDiff,
        Method::FStat,
        Method::MutualInfo,
        Method::L1Logistic,
        Method::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::MeanDiff => "mean_diff",
            Method::FStat => "f_stat",
            Method::MutualInfo => "mutual_info",
            Method::L1Logistic => "l1_logistic",
            Method::Random => "random",
        }
    }
}

/// Ranked neuron scores produced by one scoring method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub params: serde_json::Map<String, serde_json::Value>,
    /// Raw per-neuron scores (signed for mean difference).
    #[serde(with = "serde_float::vec")]
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl SelectionResult {
    /// Builds the ranking from `scores`. `secondary` orders neurons whose
    /// primary keys tie (descending), before the index tie-break.
    pub fn new(
        method: Method,
        params: serde_json::Map<String, serde_json::Value>,
        scores: Vec<f64>,
        secondary: Option<&[f64]>,
    ) -> Self {
        let key = |j: usize| rank_key(method, scores[j]);
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| {
            key(b)
                .total_cmp(&key(a))
                .then_with(|| match secondary {
                    Some(s) => s[b].total_cmp(&s[a]),
                    None => Ordering::Equal,
                })
                .then(a.cmp(&b))
        });
        SelectionResult {
            method,
            params,
            scores,
            ranking,
        }
    }

    /// The value the ranking sorts by for neuron `j`.
    pub fn rank_score(&self, j: usize) -> f64 {
        rank_key(self.method, self.scores[j])
    }

    pub fn top(&self, m: usize) -> &[usize] {
        &self.ranking[..m.min(self.ranking.len())]
    }
}

fn rank_key(method: Method, score: f64) -> f64 {
    match method {
        Method::MeanDiff => score.abs(),
        _ => score,
    }
}

fn no_params() -> serde_json::Map<String, serde_json::Value> {
    serde_json::Map::new()
}

/// Training-set class means per column: `(mean_pos, mean_neg)`.
fn class_means(task: &ProbeTask) -> (Vec<f64>, Vec<f64>) {
    let d = task.n_neurons();
    let x = task.features();
    let mut pos = vec![0.0; d];
    let mut neg = vec![0.0; d];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for &i in task.train() {
        let target = if task.labels()[i] > 0 {
            n_pos += 1;
            &mut pos
        } else {
            n_neg += 1;
            &mut neg
        };
        for (acc, v) in target.iter_mut().zip(x.row(i)) {
            *acc += f64::from(*v);
        }
    }
    pos.iter_mut().for_each(|v| *v /= n_pos as f64);
    neg.iter_mut().for_each(|v| *v /= n_neg as f64);
    (pos, neg)
}

/// `s_j = mean over positives − mean over negatives`.
pub fn score_mean_difference(task: &ProbeTask) -> SelectionResult {
    let (pos, neg) = class_means(task);
    let scores = pos.iter().zip(&neg).map(|(p, n)| p - n).collect();
    SelectionResult::new(Method::MeanDiff, no_params(), scores, None)
}

/// One-way ANOVA pieces for two groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaParts {
    pub ssb: f64,
    pub ssw: f64,
    pub n: usize,
}

impl AnovaParts {
    /// `F = (SSB / (g−1)) / (SSW / (n−g))` with `g = 2`; `+∞` when the groups
    /// have no internal spread but different means, 0 when the means agree.
    pub fn f_statistic(&self) -> f64 {
        let sst = self.ssb + self.ssw;
        if !(sst > 0.0) || self.ssb <= 1e-14 * sst {
            0.0
        } else if self.ssw <= 1e-14 * sst {
            f64::INFINITY
        } else {
            self.ssb / (self.ssw / (self.n - 2) as f64)
        }
    }
}

fn anova_parts(task: &ProbeTask) -> Vec<AnovaParts> {
    let (pos_mean, neg_mean) = class_means(task);
    let (n_pos, n_neg) = task.train_class_counts();
    let n = n_pos + n_neg;
    let d = task.n_neurons();
    let x = task.features();
    let mut ssw = vec![0.0; d];
    for &i in task.train() {
        let mean = if task.labels()[i] > 0 { &pos_mean } else { &neg_mean };
        for ((acc, v), m) in ssw.iter_mut().zip(x.row(i)).zip(mean) {
            let dev = f64::from(*v) - m;
            *acc += dev * dev;
        }
    }
    (0..d)
        .map(|j| {
            let grand = (n_pos as f64 * pos_mean[j] + n_neg as f64 * neg_mean[j]) / n as f64;
            let ssb = n_pos as f64 * (pos_mean[j] - grand).powi(2)
                + n_neg as f64 * (neg_mean[j] - grand).powi(2);
            AnovaParts {
                ssb,
                ssw: ssw[j],
                n,
            }
        })
        .collect()
}

/// Per-neuron one-way ANOVA F statistic between the two classes.
pub fn score_f_statistic(task: &ProbeTask) -> Result<SelectionResult> {
    let (n_pos, n_neg) = task.train_class_counts();
    if n_pos < 2 || n_neg < 2 {
        return Err(ProbeError::DegenerateClass(format!(
            "F statistic needs ≥ 2 training rows per class, got {n_pos} and {n_neg}"
        )));
    }
    let parts = anova_parts(task);
    let scores = parts.iter().map(AnovaParts::f_statistic).collect();
    let ssb: Vec<f64> = parts.iter().map(|p| p.ssb).collect();
    Ok(SelectionResult::new(Method::FStat, no_params(), scores, Some(&ssb)))
}

/// Nearest-neighbour mutual information between each neuron and the label.
pub fn score_mutual_information(task: &ProbeTask, neighbors: usize) -> Result<SelectionResult> {
    let (n_pos, n_neg) = task.train_class_counts();
    let min_class = n_pos.min(n_neg);
    if neighbors == 0 || neighbors >= min_class {
        return Err(ProbeError::NeighborCountTooLarge {
            k: neighbors,
            min_class,
        });
    }
    let labels = task.train_labels();
    let scores = (0..task.n_neurons())
        .map(|j| mutual_information_column(&task.train_column(j), &labels, neighbors))
        .collect::<Result<Vec<_>>>()?;
    let mut params = no_params();
    params.insert("neighbors".into(), neighbors.into());
    Ok(SelectionResult::new(Method::MutualInfo, params, scores, None))
}

/// Magnitudes of a dense L1-regularized logistic probe over every neuron, in
/// standardized units.
pub fn score_l1_logistic(
    task: &ProbeTask,
    l1_strength: f64,
    base: &TrainConfig,
) -> Result<SelectionResult> {
    if !(l1_strength > 0.0) {
        return Err(ProbeError::InvalidArgument(
            "l1_strength must be positive".into(),
        ));
    }
    let cfg = TrainConfig {
        l1: l1_strength,
        l2: 0.0,
        ..base.clone()
    };
    let support: Vec<usize> = (0..task.n_neurons()).collect();
    let probe = train_logistic(task, &support, &cfg)?;
    if !probe.converged {
        return Err(ProbeError::SolverDidNotConverge {
            iterations: probe.iterations,
            grad_norm: probe.gradient_norm,
        });
    }
    let mut scores = vec![0.0; task.n_neurons()];
    for (&j, w) in probe.support.iter().zip(&probe.weights) {
        scores[j] = w.abs();
    }
    let mut params = no_params();
    params.insert("l1_strength".into(), l1_strength.into());
    Ok(SelectionResult::new(Method::L1Logistic, params, scores, None))
}

/// Seeded random ranking: the neuron placed first gets score `d`, the last 1.
pub fn score_random(task: &ProbeTask, seed: u64) -> SelectionResult {
    let d = task.n_neurons();
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut scores = vec![0.0; d];
    for (pos, &j) in order.iter().enumerate() {
        scores[j] = (d - pos) as f64;
    }
    let mut params = no_params();
    params.insert("seed".into(), seed.into());
    SelectionResult::new(Method::Random, params, scores, None)
}

/// The `m` best-ranked neurons, in rank order.
pub fn prefilter_top_m(result: &SelectionResult, m: usize) -> Result<Vec<usize>> {
    let d = result.ranking.len();
    if m == 0 || m > d {
        return Err(ProbeError::InvalidArgument(format!(
            "prefilter size {m} outside 1..={d}"
        )));
    }
    Ok(result.ranking[..m].to_vec())
}
