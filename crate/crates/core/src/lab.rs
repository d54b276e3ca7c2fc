//! Exact two-dimensional superposition construction and synthetic datasets
//! with planted ground-truth features.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::eval::NeuronWeightStats;
use crate::store::{ActivationDataset, FeatureManifest};

/// `n` mutually exclusive features embedded on a circle of radius `alpha` in
/// two dimensions, recoverable as `x = ReLU(W Wᵀ x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleEmbedding {
    pub n_features: usize,
    pub alpha: f64,
    pub bias: f64,
    /// Row `i` is `α (cos 2πi/n, sin 2πi/n)`.
    pub weights: Vec<[f64; 2]>,
}

/// Radius and bias from `α²(1 − cos 2π/n) = 1` and `b = −α² cos 2π/n`.
pub fn build_circle_embedding(n: usize) -> Result<CircleEmbedding> {
    if n < 3 {
        return Err(ProbeError::TooFewFeatures(n));
    }
    let c = (2.0 * PI / n as f64).cos();
    let alpha_sq = 1.0 / (1.0 - c);
    let alpha = alpha_sq.sqrt();
    let weights = (0..n)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / n as f64;
            [alpha * theta.cos(), alpha * theta.sin()]
        })
        .collect();
    Ok(CircleEmbedding {
        n_features: n,
        alpha,
        bias: -alpha_sq * c,
        weights,
    })
}

/// Pre-activation `(W Wᵀ e_i + b)_j` for every `j`.
pub fn recovery_preactivations(emb: &CircleEmbedding, i: usize) -> Vec<f64> {
    let wi = emb.weights[i];
    emb.weights
        .iter()
        .map(|wj| wi[0] * wj[0] + wi[1] * wj[1] + emb.bias)
        .collect()
}

/// `max_i ‖ReLU(W Wᵀ e_i + b) − e_i‖∞`.
pub fn verify_recovery(emb: &CircleEmbedding) -> f64 {
    (0..emb.n_features)
        .map(|i| {
            recovery_preactivations(emb, i)
                .into_iter()
                .enumerate()
                .map(|(j, z)| {
                    let target = if i == j { 1.0 } else { 0.0 };
                    (z.max(0.0) - target).abs()
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Closed form `cos(2π/n) / (cos(2π/n) − 1)`, which equals the construction's
/// bias `b`.
pub fn proxy_metric(n: usize) -> Result<f64> {
    if n < 3 {
        return Err(ProbeError::TooFewFeatures(n));
    }
    let c = (2.0 * PI / n as f64).cos();
    Ok(c / (c - 1.0))
}

/// Input-weight statistics of the construction's `n` neurons.
pub fn construction_weight_stats(emb: &CircleEmbedding, layer: i32) -> Vec<NeuronWeightStats> {
    emb.weights
        .iter()
        .enumerate()
        .map(|(i, w)| NeuronWeightStats {
            layer,
            neuron: i as u32,
            input_weight_norm: (w[0] * w[0] + w[1] * w[1]).sqrt(),
            input_bias: emb.bias,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureKind {
    /// One neuron fires exactly on positives.
    Monosemantic,
    /// `m` neurons fire on every positive and on disjoint slices of the
    /// negatives; only their sum separates the classes.
    SuperposedSum { m: usize },
    /// Positives are split among `m` neurons, each firing on its share only.
    Union { m: usize },
    /// `m` neurons fire independently; positives are rows where all fire.
    Compositional { m: usize },
}

impl FeatureKind {
    pub fn planted_count(&self) -> usize {
        match *self {
            FeatureKind::Monosemantic => 1,
            FeatureKind::SuperposedSum { m }
            | FeatureKind::Union { m }
            | FeatureKind::Compositional { m } => m,
        }
    }
}

fn default_positive_fraction() -> f64 {
    0.5
}

fn default_distractor_rate() -> f64 {
    0.3
}

fn default_feature_name() -> String {
    "planted".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDatasetSpec {
    pub n_rows: usize,
    pub d_neurons: usize,
    pub feature: FeatureKind,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub layer_id: i32,
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    /// Share of negatives each superposed neuron also fires on.
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    #[serde(default = "default_feature_name")]
    pub feature_name: String,
}

impl PlantedDatasetSpec {
    pub fn new(n_rows: usize, d_neurons: usize, feature: FeatureKind, noise_sigma: f64, seed: u64) -> Self {
        PlantedDatasetSpec {
            n_rows,
            d_neurons,
            feature,
            noise_sigma,
            seed,
            layer_id: 0,
            positive_fraction: default_positive_fraction(),
            distractor_rate: default_distractor_rate(),
            feature_name: default_feature_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_indices: Vec<usize>,
    pub kind: FeatureKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub dataset: ActivationDataset,
    pub manifest: FeatureManifest,
    pub ground_truth: GroundTruth,
}

/// Firing magnitudes: uniform jitter above 1. Compositional features use a
/// narrower band so the conjunction stays linearly separable.
fn firing_range(kind: &FeatureKind) -> (f64, f64) {
    match kind {
        FeatureKind::Compositional { .. } => (1.0, 1.25),
        _ => (1.0, 2.0),
    }
}

pub const PLANTED_SEQUENCE_LENGTH: u32 = 64;

/// Generates a dataset with a planted feature. Planted neurons read 0 when
/// silent and `U[1,2]` when firing; every other neuron is `σ·N(0,1)` noise.
pub fn generate_planted(spec: &PlantedDatasetSpec) -> Result<PlantedDataset> {
    let (n, d) = (spec.n_rows, spec.d_neurons);
    let m = spec.feature.planted_count();
    if m == 0 || m > d {
        return Err(ProbeError::InfeasibleSpec(format!(
            "{m} planted neurons do not fit in {d}"
        )));
    }
    if n < 8 {
        return Err(ProbeError::InfeasibleSpec(format!("{n} rows is too few")));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(ProbeError::InfeasibleSpec("noise_sigma must be ≥ 0".into()));
    }
    if !(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0) {
        return Err(ProbeError::InfeasibleSpec(
            "positive_fraction must lie in (0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted: Vec<usize> = index::sample(&mut rng, d, m).into_vec();
    let mut is_planted = vec![false; d];
    for &j in &planted {
        is_planted[j] = true;
    }

    let mut data = Array2::<f32>::zeros((n, d));
    for ((_, j), v) in data.indexed_iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        if !is_planted[j] {
            *v = (spec.noise_sigma * z) as f32;
        }
    }

    let n_pos = ((n as f64 * spec.positive_fraction).round() as usize).clamp(2, n - 2);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let (pos_rows, neg_rows) = rows.split_at(n_pos);
    let mut labels = vec![-1i8; n];
    for &r in pos_rows {
        labels[r] = 1;
    }

    let (lo, hi) = firing_range(&spec.feature);
    let fire = |data: &mut Array2<f32>, rng: &mut ChaCha8Rng, row: usize, neuron: usize| {
        data[[row, neuron]] = rng.random_range(lo..hi) as f32;
    };

    match spec.feature {
        FeatureKind::Monosemantic => {
            for &r in pos_rows {
                fire(&mut data, &mut rng, r, planted[0]);
            }
        }
        FeatureKind::SuperposedSum { m } => {
            let share = (spec.distractor_rate * neg_rows.len() as f64).round() as usize;
            if share == 0 || share * m > neg_rows.len() {
                return Err(ProbeError::InfeasibleSpec(format!(
                    "{m} disjoint distractor sets of {share} rows need more than {} negatives",
                    neg_rows.len()
                )));
            }
            let mut negs = neg_rows.to_vec();
            negs.shuffle(&mut rng);
            for (slot, &j) in planted.iter().enumerate() {
                for &r in pos_rows {
                    fire(&mut data, &mut rng, r, j);
                }
                for &r in &negs[slot * share..(slot + 1) * share] {
                    fire(&mut data, &mut rng, r, j);
                }
            }
        }
        FeatureKind::Union { m } => {
            if m > pos_rows.len() {
                return Err(ProbeError::InfeasibleSpec(format!(
                    "cannot split {} positives among {m} neurons",
                    pos_rows.len()
                )));
            }
            for (idx, &r) in pos_rows.iter().enumerate() {
                fire(&mut data, &mut rng, r, planted[idx % m]);
            }
        }
        FeatureKind::Compositional { m } => {
            let p = 0.5f64.powf(1.0 / m as f64);
            for &r in pos_rows {
                for &j in &planted {
                    fire(&mut data, &mut rng, r, j);
                }
            }
            for &r in neg_rows {
                let pattern = loop {
                    let pat: Vec<bool> = (0..m).map(|_| rng.random_bool(p)).collect();
                    if pat.iter().any(|f| !f) {
                        break pat;
                    }
                };
                for (&j, on) in planted.iter().zip(pattern) {
                    if on {
                        fire(&mut data, &mut rng, r, j);
                    }
                }
            }
        }
    }

    let dataset =
        ActivationDataset::with_sequential_meta(spec.layer_id, data, PLANTED_SEQUENCE_LENGTH)?;
    Ok(PlantedDataset {
        dataset,
        manifest: FeatureManifest {
            feature_name: spec.feature_name.clone(),
            labels,
            spans: None,
        },
        ground_truth: GroundTruth {
            planted_indices: planted,
            kind: spec.feature,
            seed: spec.seed,
        },
    })
}

/// Paths written by [`write_planted`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFiles {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
}

/// Writes `<stem>.actv`, `<stem>.manifest.json` and `<stem>.truth.json`.
pub fn write_planted(planted: &PlantedDataset, dir: &Path, stem: &str) -> Result<PlantedFiles> {
    fs::create_dir_all(dir)?;
    let files = PlantedFiles {
        dataset: dir.join(format!("{stem}.actv")),
        manifest: dir.join(format!("{stem}.manifest.json")),
        ground_truth: dir.join(format!("{stem}.truth.json")),
    };
    planted.dataset.write(&files.dataset)?;
    planted.manifest.write(&files.manifest)?;
    fs::write(
        &files.ground_truth,
        serde_json::to_string_pretty(&planted.ground_truth)?,
    )?;
    Ok(files)
}

/// An activation layer of pure `σ·N(0,1)` noise, for padding a planted
/// benchmark with uninformative layers.
pub fn generate_noise_layer(
    n_rows: usize,
    d_neurons: usize,
    noise_sigma: f64,
    seed: u64,
    layer_id: i32,
) -> Result<ActivationDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_simple_fn((n_rows, d_neurons), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        (noise_sigma * z) as f32
    });
    ActivationDataset::with_sequential_meta(layer_id, data, PLANTED_SEQUENCE_LENGTH)
}

/// A planted dataset plus optional noise-only layers sharing its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub planted: PlantedDatasetSpec,
    /// Extra layers numbered after the planted layer.
    #[serde(default)]
    pub noise_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub files: PlantedFiles,
    pub noise_layer_paths: Vec<PathBuf>,
    pub ground_truth: GroundTruth,
}

/// Generates and writes a [`SynthSpec`] under `dir`, using the feature name
/// as file stem.
pub fn synthesize(spec: &SynthSpec, dir: &Path) -> Result<SynthOutput> {
    let planted = generate_planted(&spec.planted)?;
    let stem = spec.planted.feature_name.clone();
    let files = write_planted(&planted, dir, &stem)?;
    let p = &spec.planted;
    let mut noise_layer_paths = Vec::with_capacity(spec.noise_layers);
    for i in 1..=spec.noise_layers {
        let layer = p.layer_id + i as i32;
        let ds = generate_noise_layer(
            p.n_rows,
            p.d_neurons,
            p.noise_sigma,
            p.seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            layer,
        )?;
        let path = dir.join(format!("{stem}.layer{layer}.actv"));
        ds.write(&path)?;
        noise_layer_paths.push(path);
    }
    Ok(SynthOutput {
        files,
        noise_layer_paths,
        ground_truth: planted.ground_truth,
    })
}
