//! Classification metrics and the secondary analyses built on them:
//! neuron-vs-random basis comparison, summed-activation separation,
//! activation co-occurrence, and the weight-norm × bias fingerprint.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::probe::{logistic_test_loss, train_logistic, SparseProbe, TrainConfig};
use crate::scoring::{prefilter_top_m, score_mean_difference};
use crate::store::{
    make_task, project_random_basis, ActivationDataset, BasisKind, FeatureManifest, ProbeTask,
    Weighting,
};

/// Confusion counts on the test split and the metrics derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub logistic_loss: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, logistic_loss: f64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if tp == 0 || precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        let mcc = if factors.contains(&0) {
            0.0
        } else {
            let den = factors.iter().map(|&f| f as f64).product::<f64>().sqrt();
            (tp as f64 * tn as f64 - fp as f64 * fn_ as f64) / den
        };
        EvalReport {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            mcc,
            logistic_loss,
        }
    }

    /// Counts `(prediction, label)` pairs.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (i8, i8)>, logistic_loss: f64) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (pred, label) in pairs {
            match (pred > 0, label > 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn, logistic_loss)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Scores the probe on the task's test split at the probe's threshold.
pub fn evaluate(probe: &SparseProbe, task: &ProbeTask) -> Result<EvalReport> {
    let rows = task.test();
    let logits = probe.task_logits(task, rows)?;
    let loss = logistic_test_loss(probe, task)?;
    let pairs = rows.iter().zip(&logits).map(|(&i, &z)| {
        let pred = if z > probe.threshold { 1 } else { -1 };
        (pred, task.labels()[i])
    });
    Ok(EvalReport::from_predictions(pairs, loss))
}

/// Summed activation over a neuron set, split by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// `min(positive sums) − max(negative sums)`; positive means the plain sum
    /// separates the classes.
    pub margin: f64,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn summed_activation_separation(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    support: &[usize],
) -> Result<SeparationReport> {
    manifest.validate_for(ds)?;
    if support.is_empty() {
        return Err(ProbeError::InvalidArgument("support is empty".into()));
    }
    let d = ds.n_neurons();
    if let Some(&bad) = support.iter().find(|&&j| j >= d) {
        return Err(ProbeError::SupportOutOfRange { index: bad, cols: d });
    }
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (row, &label) in ds.data().outer_iter().zip(&manifest.labels) {
        let sum: f64 = support.iter().map(|&j| f64::from(row[j])).sum();
        if label > 0 {
            positive.push(sum);
        } else {
            negative.push(sum);
        }
    }
    if positive.is_empty() || negative.is_empty() {
        return Err(ProbeError::DegenerateClass(
            "separation needs both classes".into(),
        ));
    }
    let min_pos = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let max_neg = negative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SeparationReport {
        margin: min_pos - max_neg,
        positive,
        negative,
    })
}

/// `M[a][b]` = fraction of positive rows where both `support[a]` and
/// `support[b]` exceed `active_threshold`.
pub fn activation_cooccurrence(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    support: &[usize],
    active_threshold: f64,
) -> Result<Vec<Vec<f64>>> {
    manifest.validate_for(ds)?;
    if support.is_empty() {
        return Err(ProbeError::InvalidArgument("support is empty".into()));
    }
    let d = ds.n_neurons();
    if let Some(&bad) = support.iter().find(|&&j| j >= d) {
        return Err(ProbeError::SupportOutOfRange { index: bad, cols: d });
    }
    let m = support.len();
    let mut counts = vec![vec![0u64; m]; m];
    let mut n_pos = 0u64;
    for (row, &label) in ds.data().outer_iter().zip(&manifest.labels) {
        if label <= 0 {
            continue;
        }
        n_pos += 1;
        let active: Vec<bool> = support
            .iter()
            .map(|&j| f64::from(row[j]) > active_threshold)
            .collect();
        for a in 0..m {
            if !active[a] {
                continue;
            }
            for b in 0..m {
                if active[b] {
                    counts[a][b] += 1;
                }
            }
        }
    }
    if n_pos == 0 {
        return Err(ProbeError::DegenerateClass("no positive rows".into()));
    }
    Ok(counts
        .into_iter()
        .map(|r| r.into_iter().map(|c| c as f64 / n_pos as f64).collect())
        .collect())
}

/// Input-side weight statistics for one MLP neuron, one JSON object per line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronWeightStats {
    pub layer: i32,
    pub neuron: u32,
    pub input_weight_norm: f64,
    pub input_bias: f64,
}

pub fn load_weight_stats(path: impl AsRef<Path>) -> Result<Vec<NeuronWeightStats>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NeuronWeightStats = serde_json::from_str(&line)?;
        if !(rec.input_weight_norm >= 0.0 && rec.input_weight_norm.is_finite())
            || !rec.input_bias.is_finite()
        {
            return Err(ProbeError::InvalidArgument(format!(
                "line {}: weight norm must be finite and non-negative",
                lineno + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub const FINGERPRINT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFingerprint {
    pub layer: i32,
    pub neurons: usize,
    /// Values at [`FINGERPRINT_QUANTILES`].
    pub quantiles: Vec<f64>,
    pub cutoff: f64,
    pub fraction_below_cutoff: f64,
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per layer: the distribution of `b_in · ‖w_in‖₂` and the share of neurons
/// strictly below `cutoff`.
pub fn weight_fingerprint(stats: &[NeuronWeightStats], cutoff: f64) -> Result<Vec<LayerFingerprint>> {
    if stats.is_empty() {
        return Err(ProbeError::InvalidArgument("no weight statistics".into()));
    }
    let mut by_layer: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for s in stats {
        by_layer
            .entry(s.layer)
            .or_default()
            .push(s.input_bias * s.input_weight_norm);
    }
    Ok(by_layer
        .into_iter()
        .map(|(layer, mut values)| {
            values.sort_by(f64::total_cmp);
            let below = values.iter().filter(|&&v| v < cutoff).count();
            LayerFingerprint {
                layer,
                neurons: values.len(),
                quantiles: FINGERPRINT_QUANTILES
                    .iter()
                    .map(|&q| quantile_sorted(&values, q))
                    .collect(),
                cutoff,
                fraction_below_cutoff: below as f64 / values.len() as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisStudyOptions {
    pub test_fraction: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub kind: BasisKind,
}

impl Default for BasisStudyOptions {
    fn default() -> Self {
        BasisStudyOptions {
            test_fraction: 0.2,
            split_seed: 0,
            train: TrainConfig::default(),
            kind: BasisKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisAlignmentReport {
    /// F1 of the 1-sparse probe on the i-th dimension by mean difference.
    pub neuron_curve: Vec<f64>,
    pub random_curves: Vec<Vec<f64>>,
    pub random_mean: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn one_sparse_curve(task: &ProbeTask, top_n: usize, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let ranking = score_mean_difference(task);
    let top = prefilter_top_m(&ranking, top_n)?;
    top.iter()
        .map(|&j| {
            let probe = train_logistic(task, &[j], cfg)?;
            Ok(evaluate(&probe, task)?.f1)
        })
        .collect()
}

/// Compares 1-sparse probe quality in the neuron basis against seeded random
/// bases. All bases share one train/test split.
pub fn basis_alignment_study(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    top_n: usize,
    seeds: &[u64],
    opts: &BasisStudyOptions,
) -> Result<BasisAlignmentReport> {
    if top_n == 0 || top_n > ds.n_neurons() {
        return Err(ProbeError::InvalidArgument(format!(
            "top_n {top_n} outside 1..={}",
            ds.n_neurons()
        )));
    }
    let task = make_task(ds, manifest, opts.test_fraction, opts.split_seed, Weighting::Balanced)?;
    let neuron_curve = one_sparse_curve(&task, top_n, &opts.train)?;
    let mut random_curves = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let projected = project_random_basis(ds, seed, opts.kind)?;
        let rtask = task.with_features(Arc::new(projected.into_data()))?;
        random_curves.push(one_sparse_curve(&rtask, top_n, &opts.train)?);
    }
    let random_mean = (0..top_n)
        .map(|i| {
            if random_curves.is_empty() {
                f64::NAN
            } else {
                random_curves.iter().map(|c| c[i]).sum::<f64>() / random_curves.len() as f64
            }
        })
        .collect();
    Ok(BasisAlignmentReport {
        neuron_curve,
        random_curves,
        random_mean,
        seeds: seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn worked_confusion_table() {
        let r = EvalReport::from_counts(2, 1, 1, 6, 0.0);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_all_positive() {
        let r = EvalReport::from_counts(5, 0, 0, 5, 0.0);
        assert_eq!((r.precision, r.recall, r.f1, r.mcc), (1.0, 1.0, 1.0, 1.0));
        let r = EvalReport::from_counts(5, 5, 0, 0, 0.0);
        assert_eq!((r.recall, r.precision, r.mcc), (1.0, 0.5, 0.0));
    }

    #[test]
    fn zero_tp_has_zero_f1() {
        let r = EvalReport::from_counts(0, 3, 4, 3, 0.0);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.total(), 10);
    }

    fn ds(rows: ndarray::Array2<f32>) -> ActivationDataset {
        ActivationDataset::with_sequential_meta(0, rows, 100).unwrap()
    }

    #[test]
    fn monosemantic_margin_positive() {
        let d = ds(array![[1.0, 0.3], [1.5, 0.1], [0.0, 0.9], [0.1, 0.2]]);
        let m = FeatureManifest {
            feature_name: "f".into(),
            labels: vec![1, 1, -1, -1],
            spans: None,
        };
        let rep = summed_activation_separation(&d, &m, &[0]).unwrap();
        assert!((rep.margin - 0.9).abs() < 1e-6);
        assert_eq!(rep.positive.len(), 2);
    }

    #[test]
    fn cooccurrence_duplicates_and_threshold() {
        let d = ds(array![[1.0, 1.0, 0.0], [0.0, 0.0, 2.0], [1.0, 1.0, 1.0], [5.0, 5.0, 5.0]]);
        let m = FeatureManifest {
            feature_name: "f".into(),
            labels: vec![1, 1, 1, -1],
            spans: None,
        };
        let c = activation_cooccurrence(&d, &m, &[0, 1, 2], 0.0).unwrap();
        assert_eq!(c[0][1], c[0][0]);
        assert!((c[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[0][2] - 1.0 / 3.0).abs() < 1e-12);
        let c = activation_cooccurrence(&d, &m, &[0, 1, 2], 10.0).unwrap();
        assert!(c.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn fingerprint_zero_bias() {
        let stats: Vec<NeuronWeightStats> = (0..10)
            .map(|i| NeuronWeightStats {
                layer: i % 2,
                neuron: i as u32,
                input_weight_norm: i as f64,
                input_bias: 0.0,
            })
            .collect();
        let fp = weight_fingerprint(&stats, -1.0).unwrap();
        assert_eq!(fp.len(), 2);
        for layer in fp {
            assert!(layer.quantiles.iter().all(|&q| q == 0.0));
            assert_eq!(layer.fraction_below_cutoff, 0.0);
        }
    }

    #[test]
    fn fingerprint_quantiles_match_sort() {
        let values = [3.0, -1.0, 4.0, -1.5, 5.0, -9.0, 2.0, 6.0];
        let stats: Vec<NeuronWeightStats> = values
            .iter()
            .enumerate()
            .map(|(i, &b)| NeuronWeightStats {
                layer: 0,
                neuron: i as u32,
                input_weight_norm: 2.0,
                input_bias: b,
            })
            .collect();
        let fp = weight_fingerprint(&stats, -1.0).unwrap();
        let mut prod: Vec<f64> = values.iter().map(|b| b * 2.0).collect();
        prod.sort_by(f64::total_cmp);
        // median of 8 sorted values = mean of 4th and 5th
        assert!((fp[0].quantiles[2] - (prod[3] + prod[4]) / 2.0).abs() < 1e-12);
        assert_eq!(fp[0].quantiles[0], prod[0] + (prod[1] - prod[0]) * 0.35);
        assert!((fp[0].fraction_below_cutoff - 3.0 / 8.0).abs() < 1e-12);
        assert!(weight_fingerprint(&[], -1.0).is_err());
    }

    #[test]
    fn weight_stats_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.jsonl");
        std::fs::write(
            &path,
            "{\"layer\":1,\"neuron\":0,\"input_weight_norm\":2.0,\"input_bias\":-0.5}\n\n{\"layer\":1,\"neuron\":1,\"input_weight_norm\":1.0,\"input_bias\":0.25}\n",
        )
        .unwrap();
        let stats = load_weight_stats(&path).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].input_bias * stats[0].input_weight_norm, -1.0);
        std::fs::write(
            &path,
            "{\"layer\":1,\"neuron\":0,\"input_weight_norm\":-2.0,\"input_bias\":-0.5}\n",
        )
        .unwrap();
        assert!(load_weight_stats(&path).is_err());
    }
}
