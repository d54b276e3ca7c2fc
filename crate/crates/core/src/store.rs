//! Activation datasets, feature manifests and probe tasks.
//!
//! Datasets live on disk in the little-endian ACTV1 format:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `ACTV`                           |
//! | 4      | 4    | format version (`u32`, always 1)       |
//! | 8      | 8    | rows `n` (`u64`)                       |
//! | 16     | 8    | neurons `d` (`u64`)                    |
//! | 24     | 1    | dtype (`u8`, 1 = IEEE f32)             |
//! | 25     | 4    | layer id (`i32`)                       |
//! | 29     | 11   | reserved, zero                         |
//! | 40     | 4·n·d | row-major activations                 |
//! | ...    | 8·n  | `(sequence_id u32, token_index u32)`   |
//!
//! Manifests are JSON documents carrying one `±1` label per row and optional
//! token spans.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

pub const ACTV_MAGIC: &[u8; 4] = b"ACTV";
pub const ACTV_VERSION: u32 = 1;
pub const ACTV_DTYPE_F32: u8 = 1;
pub const ACTV_HEADER_LEN: usize = 40;

/// Where a row came from: the token position inside a source sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowMeta {
    pub sequence_id: u32,
    pub token_index: u32,
}

/// Post-nonlinearity activations for one layer: rows are token instances,
/// columns are neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    layer_id: i32,
    data: Array2<f32>,
    row_meta: Vec<RowMeta>,
}

impl ActivationDataset {
    pub fn new(layer_id: i32, data: Array2<f32>, row_meta: Vec<RowMeta>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(ProbeError::InvalidDataset(format!(
                "dataset must be non-empty, got {n}x{d}"
            )));
        }
        if row_meta.len() != n {
            return Err(ProbeError::InvalidDataset(format!(
                "row_meta has {} entries for {n} rows",
                row_meta.len()
            )));
        }
        for (row, values) in data.outer_iter().enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(ProbeError::NonFiniteValue { row, col });
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for meta in &row_meta {
            if !seen.insert(*meta) {
                return Err(ProbeError::InvalidDataset(format!(
                    "duplicate row meta (sequence {}, token {})",
                    meta.sequence_id, meta.token_index
                )));
            }
        }
        Ok(Self {
            layer_id,
            data,
            row_meta,
        })
    }

    /// Dataset with synthetic row metadata: one sequence per `seq_len` rows.
    pub fn with_sequential_meta(layer_id: i32, data: Array2<f32>, seq_len: u32) -> Result<Self> {
        let seq_len = seq_len.max(1);
        let meta = (0..data.nrows() as u32)
            .map(|r| RowMeta {
                sequence_id: r / seq_len,
                token_index: r % seq_len,
            })
            .collect();
        Self::new(layer_id, data, meta)
    }

    pub fn layer_id(&self) -> i32 {
        self.layer_id
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn row_meta(&self) -> &[RowMeta] {
        &self.row_meta
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_neurons(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.data.dim();
        let mut out = Vec::with_capacity(ACTV_HEADER_LEN + 4 * n * d + 8 * n);
        out.extend_from_slice(ACTV_MAGIC);
        out.extend_from_slice(&ACTV_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.push(ACTV_DTYPE_F32);
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.extend_from_slice(&[0u8; 11]);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for meta in &self.row_meta {
            out.extend_from_slice(&meta.sequence_id.to_le_bytes());
            out.extend_from_slice(&meta.token_index.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ACTV_HEADER_LEN {
            return Err(ProbeError::MalformedHeader(format!(
                "file is {} bytes, header needs {ACTV_HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != ACTV_MAGIC {
            return Err(ProbeError::MalformedHeader("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ACTV_VERSION {
            return Err(ProbeError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let dtype = bytes[24];
        if dtype != ACTV_DTYPE_F32 {
            return Err(ProbeError::MalformedHeader(format!("unsupported dtype {dtype}")));
        }
        let layer_id = i32::from_le_bytes(bytes[25..29].try_into().unwrap());
        if bytes[29..40].iter().any(|&b| b != 0) {
            return Err(ProbeError::MalformedHeader("reserved bytes are not zero".into()));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|b| b.checked_add(n.checked_mul(8)?))
            .ok_or_else(|| ProbeError::MalformedHeader(format!("dimensions {n}x{d} overflow")))?;
        let payload = &bytes[ACTV_HEADER_LEN..];
        if payload.len() as u64 != expected {
            return Err(ProbeError::DimensionMismatch {
                expected,
                actual: payload.len() as u64,
            });
        }
        let (n, d) = (n as usize, d as usize);
        let (values, meta) = payload.split_at(4 * n * d);
        let values: Vec<f32> = values
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let row_meta = meta
            .chunks_exact(8)
            .map(|c| RowMeta {
                sequence_id: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                token_index: u32::from_le_bytes(c[4..8].try_into().unwrap()),
            })
            .collect();
        let data = Array2::from_shape_vec((n, d), values)
            .map_err(|e| ProbeError::InvalidDataset(e.to_string()))?;
        Self::new(layer_id, data, row_meta)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads and validates an ACTV1 file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let bytes = fs::read(path)?;
    ActivationDataset::from_bytes(&bytes)
}

/// A multi-token feature occurrence, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32, u32)", into = "(u32, u32, u32)")]
pub struct Span {
    pub sequence_id: u32,
    pub start_token: u32,
    pub end_token: u32,
}

impl From<(u32, u32, u32)> for Span {
    fn from((sequence_id, start_token, end_token): (u32, u32, u32)) -> Self {
        Span {
            sequence_id,
            start_token,
            end_token,
        }
    }
}

impl From<Span> for (u32, u32, u32) {
    fn from(s: Span) -> Self {
        (s.sequence_id, s.start_token, s.end_token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub feature_name: String,
    pub labels: Vec<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<Span>>,
}

impl FeatureManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: FeatureManifest = serde_json::from_str(&text)?;
        if let Some(bad) = manifest.labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(ProbeError::InvalidManifest(format!("label {bad} is not ±1")));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Checks the manifest against a dataset: label count, label values and
    /// span validity.
    pub fn validate_for(&self, ds: &ActivationDataset) -> Result<()> {
        if self.labels.len() != ds.n_rows() {
            return Err(ProbeError::InvalidManifest(format!(
                "{} labels for {} rows",
                self.labels.len(),
                ds.n_rows()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(ProbeError::InvalidManifest(format!("label {bad} is not ±1")));
        }
        if let Some(spans) = &self.spans {
            let mut starts = HashSet::with_capacity(spans.len());
            for (i, s) in spans.iter().enumerate() {
                if s.start_token > s.end_token {
                    return Err(ProbeError::InvalidManifest(format!(
                        "span {i} has start {} > end {}",
                        s.start_token, s.end_token
                    )));
                }
                // aggregated rows are keyed by (sequence, start)
                if !starts.insert((s.sequence_id, s.start_token)) {
                    return Err(ProbeError::InvalidManifest(format!(
                        "span {i} repeats start (sequence {}, token {})",
                        s.sequence_id, s.start_token
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

fn span_rows(ds: &ActivationDataset, spans: &[Span]) -> Result<Vec<Vec<usize>>> {
    let mut starts = HashSet::with_capacity(spans.len());
    if let Some(i) = spans
        .iter()
        .position(|s| !starts.insert((s.sequence_id, s.start_token)))
    {
        return Err(ProbeError::InvalidManifest(format!(
            "span {i} repeats start (sequence {}, token {})",
            spans[i].sequence_id, spans[i].start_token
        )));
    }
    let index: BTreeMap<RowMeta, usize> = ds
        .row_meta()
        .iter()
        .enumerate()
        .map(|(r, m)| (*m, r))
        .collect();
    spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.start_token > s.end_token {
                return Err(ProbeError::EmptySpan { index: i });
            }
            let lo = RowMeta {
                sequence_id: s.sequence_id,
                token_index: s.start_token,
            };
            let hi = RowMeta {
                sequence_id: s.sequence_id,
                token_index: s.end_token,
            };
            let rows: Vec<usize> = index.range(lo..=hi).map(|(_, &r)| r).collect();
            if rows.is_empty() {
                return Err(ProbeError::EmptySpan { index: i });
            }
            Ok(rows)
        })
        .collect()
}

/// Collapses every manifest span into one row by taking the column-wise mean
/// or max over the span's token rows.
pub fn aggregate_spans(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    mode: Aggregation,
) -> Result<ActivationDataset> {
    let spans = manifest.spans.as_deref().ok_or(ProbeError::MissingSpans)?;
    if spans.is_empty() {
        return Err(ProbeError::MissingSpans);
    }
    let groups = span_rows(ds, spans)?;
    let d = ds.n_neurons();
    let mut out = Array2::<f32>::zeros((spans.len(), d));
    for (mut target, rows) in out.outer_iter_mut().zip(&groups) {
        match mode {
            Aggregation::Mean => {
                let mut acc = vec![0f64; d];
                for &r in rows {
                    for (a, v) in acc.iter_mut().zip(ds.data.row(r)) {
                        *a += f64::from(*v);
                    }
                }
                let len = rows.len() as f64;
                for (t, a) in target.iter_mut().zip(acc) {
                    *t = (a / len) as f32;
                }
            }
            Aggregation::Max => {
                target.fill(f32::NEG_INFINITY);
                for &r in rows {
                    for (t, v) in target.iter_mut().zip(ds.data.row(r)) {
                        *t = t.max(*v);
                    }
                }
            }
        }
    }
    let meta = spans
        .iter()
        .map(|s| RowMeta {
            sequence_id: s.sequence_id,
            token_index: s.start_token,
        })
        .collect();
    ActivationDataset::new(ds.layer_id, out, meta)
}

/// Aggregates both activations and labels over spans. A span is positive when
/// any of its token rows is labelled positive.
pub fn aggregate_with_labels(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    mode: Aggregation,
) -> Result<(ActivationDataset, FeatureManifest)> {
    manifest.validate_for(ds)?;
    let spans = manifest.spans.as_deref().ok_or(ProbeError::MissingSpans)?;
    let groups = span_rows(ds, spans)?;
    let labels = groups
        .iter()
        .map(|rows| {
            if rows.iter().any(|&r| manifest.labels[r] > 0) {
                1
            } else {
                -1
            }
        })
        .collect();
    let agg = aggregate_spans(ds, manifest, mode)?;
    Ok((
        agg,
        FeatureManifest {
            feature_name: manifest.feature_name.clone(),
            labels,
            spans: None,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Weighting {
    Balanced,
    Custom { positive: f64, negative: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl ClassWeights {
    /// `w₊ = n / (2|P|)`, `w₋ = n / (2|N|)`.
    pub fn balanced(n_pos: usize, n_neg: usize) -> Self {
        let n = (n_pos + n_neg) as f64;
        ClassWeights {
            positive: n / (2.0 * n_pos as f64),
            negative: n / (2.0 * n_neg as f64),
        }
    }

    pub fn for_label(&self, label: i8) -> f64 {
        if label > 0 {
            self.positive
        } else {
            self.negative
        }
    }
}

/// A binary probing problem over a feature matrix with a fixed stratified
/// train/test split.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    features: Arc<Array2<f32>>,
    labels: Vec<i8>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    class_weights: ClassWeights,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl ProbeTask {
    /// Builds a task from explicit parts, checking every invariant.
    pub fn from_parts(
        features: Arc<Array2<f32>>,
        labels: Vec<i8>,
        class_weights: ClassWeights,
        mut train: Vec<usize>,
        mut test: Vec<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(ProbeError::InvalidArgument(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(ProbeError::InvalidArgument(format!("label {bad} is not ±1")));
        }
        if !(class_weights.positive > 0.0 && class_weights.negative > 0.0)
            || !class_weights.positive.is_finite()
            || !class_weights.negative.is_finite()
        {
            return Err(ProbeError::InvalidArgument(
                "class weights must be positive and finite".into(),
            ));
        }
        train.sort_unstable();
        test.sort_unstable();
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n {
                return Err(ProbeError::InvalidArgument(format!("row {i} out of range")));
            }
            if seen[i] {
                return Err(ProbeError::InvalidArgument(format!(
                    "row {i} appears twice in the split"
                )));
            }
            seen[i] = true;
        }
        for (name, part) in [("train", &train), ("test", &test)] {
            let pos = part.iter().filter(|&&i| labels[i] > 0).count();
            if pos == 0 || pos == part.len() {
                return Err(ProbeError::DegenerateClass(format!(
                    "{name} split lacks one of the classes"
                )));
            }
        }
        let positives = (0..n).filter(|&i| labels[i] > 0).collect();
        let negatives = (0..n).filter(|&i| labels[i] < 0).collect();
        Ok(Self {
            features,
            labels,
            positives,
            negatives,
            class_weights,
            train,
            test,
        })
    }

    /// Stratified split: each class is shuffled with `seed` and split
    /// independently at `test_fraction`.
    pub fn from_labels(
        features: Arc<Array2<f32>>,
        labels: Vec<i8>,
        test_fraction: f64,
        seed: u64,
        weighting: Weighting,
    ) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(ProbeError::InvalidArgument(format!(
                "test_fraction {test_fraction} outside (0, 1)"
            )));
        }
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0).collect();
        if pos.len() < 2 || neg.len() < 2 {
            return Err(ProbeError::DegenerateClass(format!(
                "need at least 2 examples per class, got {} positive and {} negative",
                pos.len(),
                neg.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::with_capacity(labels.len());
        let mut test = Vec::new();
        for mut class in [pos.clone(), neg.clone()] {
            class.shuffle(&mut rng);
            let n_test = ((class.len() as f64 * test_fraction).round() as usize)
                .clamp(1, class.len() - 1);
            test.extend_from_slice(&class[..n_test]);
            train.extend_from_slice(&class[n_test..]);
        }
        let class_weights = match weighting {
            Weighting::Balanced => ClassWeights::balanced(pos.len(), neg.len()),
            Weighting::Custom { positive, negative } => ClassWeights { positive, negative },
        };
        Self::from_parts(features, labels, class_weights, train, test)
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<Array2<f32>> {
        Arc::clone(&self.features)
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    pub fn class_weights(&self) -> ClassWeights {
        self.class_weights
    }

    pub fn weight(&self, row: usize) -> f64 {
        self.class_weights.for_label(self.labels[row])
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn n_neurons(&self) -> usize {
        self.features.ncols()
    }

    /// Number of positive and negative rows in the training split.
    pub fn train_class_counts(&self) -> (usize, usize) {
        let pos = self.train.iter().filter(|&&i| self.labels[i] > 0).count();
        (pos, self.train.len() - pos)
    }

    /// Training-row values of one column, widened to f64.
    pub fn train_column(&self, col: usize) -> Vec<f64> {
        self.train
            .iter()
            .map(|&i| f64::from(self.features[[i, col]]))
            .collect()
    }

    pub fn train_labels(&self) -> Vec<i8> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    /// Same labels and split restricted to a subset of columns; column `c` of
    /// the result is column `cols[c]` of `self`.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let d = self.n_neurons();
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(ProbeError::SupportOutOfRange { index: bad, cols: d });
        }
        let sub = self.features.select(Axis(1), cols);
        Ok(Self {
            features: Arc::new(sub),
            ..self.clone()
        })
    }

    /// Same split and weights over a different feature matrix with the same
    /// row count.
    pub fn with_features(&self, features: Arc<Array2<f32>>) -> Result<Self> {
        if features.nrows() != self.features.nrows() {
            return Err(ProbeError::InvalidArgument(format!(
                "replacement features have {} rows, task has {}",
                features.nrows(),
                self.features.nrows()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }
}

/// Builds a probing task for `manifest` over `ds`.
pub fn make_task(
    ds: &ActivationDataset,
    manifest: &FeatureManifest,
    test_fraction: f64,
    seed: u64,
    weighting: Weighting,
) -> Result<ProbeTask> {
    manifest.validate_for(ds)?;
    ProbeTask::from_labels(
        Arc::new(ds.data.clone()),
        manifest.labels.clone(),
        test_fraction,
        seed,
        weighting,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Gaussian,
    Orthogonal,
}

/// The seeded `d×d` rotation used by [`project_random_basis`].
pub fn random_basis(d: usize, seed: u64, kind: BasisKind) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let gaussian: Vec<f64> = (0..d * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    match kind {
        BasisKind::Gaussian => {
            Array2::from_shape_vec((d, d), gaussian.into_iter().map(|g| g * scale).collect())
                .expect("square shape")
        }
        BasisKind::Orthogonal => {
            let g = DMatrix::from_row_slice(d, d, &gaussian);
            let qr = g.qr();
            let (mut q, r) = qr.unpack();
            // sign-fix so Q is Haar distributed rather than biased by the
            // Householder convention
            for j in 0..d {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
        }
    }
}

/// Re-expresses every row in a seeded random basis: returns `X·R`.
pub fn project_random_basis(
    ds: &ActivationDataset,
    seed: u64,
    kind: BasisKind,
) -> Result<ActivationDataset> {
    let basis = random_basis(ds.n_neurons(), seed, kind);
    let x = ds.data.mapv(f64::from);
    let projected = x.dot(&basis).mapv(|v| v as f32);
    ActivationDataset::new(ds.layer_id, projected, ds.row_meta.clone())
}
