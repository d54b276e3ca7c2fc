//! Config-driven sweeps over (feature, layer, method, k) and their summaries.
//!
//! Each (feature, layer, method) work unit is pure given the config, so any
//! number of workers produce the same records. A single writer emits records
//! in grid order and flushes after every unit; wall-clock timings go to a
//! separate file so `records.jsonl` is byte-reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, OnceLock};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::pipeline::{
    Cell, CellStatus, CellTask, ExperimentRecord, MethodSettings, MethodTiming, ProbeMethod,
};
use crate::store::{
    aggregate_with_labels, load_dataset, ActivationDataset, Aggregation, FeatureManifest,
    ProbeTask, Weighting,
};

fn default_test_fraction() -> f64 {
    0.2
}

fn default_aggregation() -> Aggregation {
    Aggregation::Mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One ACTV1 file per layer.
    pub dataset_paths: Vec<PathBuf>,
    /// One manifest per feature.
    pub manifest_paths: Vec<PathBuf>,
    pub methods: Vec<ProbeMethod>,
    pub k_grid: Vec<usize>,
    #[serde(flatten)]
    pub settings: MethodSettings,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// How span manifests collapse token rows.
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
}

impl ExperimentConfig {
    /// Parses a JSON config; relative paths resolve against the config's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ProbeError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ProbeError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.dataset_paths.iter_mut().for_each(resolve);
        cfg.manifest_paths.iter_mut().for_each(resolve);
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(ProbeError::ConfigInvalid(msg));
        if self.dataset_paths.is_empty() {
            return invalid("no dataset paths".into());
        }
        if self.manifest_paths.is_empty() {
            return invalid("no manifest paths".into());
        }
        if self.methods.is_empty() {
            return invalid("no methods".into());
        }
        if self.k_grid.is_empty() {
            return invalid("empty k grid".into());
        }
        let m = self.settings.prefilter_m;
        if m == 0 {
            return invalid("prefilter_m must be ≥ 1".into());
        }
        if let Some(k) = self.k_grid.iter().find(|&&k| k == 0 || k > m) {
            return invalid(format!("k = {k} outside 1..={m}"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return invalid(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        self.settings
            .train
            .validate()
            .map_err(|e| ProbeError::ConfigInvalid(format!("train: {e}")))?;
        let osp = &self.settings.osp;
        if !(osp.gamma > 0.0 && osp.inner_tolerance > 0.0 && osp.timeout_secs > 0.0)
            || osp.candidate_pool == 0
        {
            return invalid("osp: gamma, inner_tolerance, timeout and candidate_pool must be positive".into());
        }
        for p in self.dataset_paths.iter().chain(&self.manifest_paths) {
            if let Err(e) = File::open(p) {
                return invalid(format!("cannot read {}: {e}", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub dry_run: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub features: Vec<String>,
    pub layers: Vec<i32>,
    pub methods: Vec<ProbeMethod>,
    pub k_grid: Vec<usize>,
    pub cells: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub plan: RunPlan,
    pub records: Vec<ExperimentRecord>,
    pub timings: Vec<MethodTiming>,
    pub records_path: Option<PathBuf>,
}

impl RunOutcome {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Seed for the random baseline of one (feature, layer) pair.
fn cell_seed(seed: u64, feature: usize, layer: usize) -> u64 {
    seed ^ (feature as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((layer as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

fn build_task(
    ds: &ActivationDataset,
    shared: &Arc<ndarray::Array2<f32>>,
    manifest: &FeatureManifest,
    cfg: &ExperimentConfig,
) -> Result<ProbeTask> {
    if manifest.spans.is_some() {
        let (agg, labels) = aggregate_with_labels(ds, manifest, cfg.aggregation)?;
        return ProbeTask::from_labels(
            Arc::new(agg.into_data()),
            labels.labels,
            cfg.test_fraction,
            cfg.seed,
            Weighting::Balanced,
        );
    }
    manifest.validate_for(ds)?;
    ProbeTask::from_labels(
        Arc::clone(shared),
        manifest.labels.clone(),
        cfg.test_fraction,
        cfg.seed,
        Weighting::Balanced,
    )
}

struct Unit {
    cell: usize,
    method: ProbeMethod,
}

/// Runs the grid and writes `config.json`, `records.jsonl` and
/// `timings.jsonl` under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let manifests = cfg
        .manifest_paths
        .iter()
        .map(|p| {
            FeatureManifest::load(p)
                .map_err(|e| ProbeError::ConfigInvalid(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    for m in &manifests {
        if !seen.insert(m.feature_name.as_str()) {
            return Err(ProbeError::ConfigInvalid(format!(
                "duplicate feature name {}",
                m.feature_name
            )));
        }
    }
    let datasets = cfg
        .dataset_paths
        .iter()
        .map(|p| {
            load_dataset(p).map_err(|e| ProbeError::ConfigInvalid(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layers = BTreeSet::new();
    for ds in &datasets {
        if !layers.insert(ds.layer_id()) {
            return Err(ProbeError::ConfigInvalid(format!(
                "layer {} appears twice",
                ds.layer_id()
            )));
        }
    }
    let plan = RunPlan {
        features: manifests.iter().map(|m| m.feature_name.clone()).collect(),
        layers: datasets.iter().map(|d| d.layer_id()).collect(),
        methods: cfg.methods.clone(),
        k_grid: cfg.k_grid.clone(),
        cells: manifests.len() * datasets.len() * cfg.methods.len() * cfg.k_grid.len(),
    };
    if opts.dry_run {
        return Ok(RunOutcome {
            plan,
            records: Vec::new(),
            timings: Vec::new(),
            records_path: None,
        });
    }

    let shared: Vec<Arc<ndarray::Array2<f32>>> =
        datasets.iter().map(|d| Arc::new(d.data().clone())).collect();
    let mut cells: Vec<std::result::Result<CellTask, (String, i32, String)>> = Vec::new();
    for (fi, manifest) in manifests.iter().enumerate() {
        for (li, ds) in datasets.iter().enumerate() {
            let feature = manifest.feature_name.clone();
            let layer = ds.layer_id();
            cells.push(match build_task(ds, &shared[li], manifest, cfg) {
                Ok(task) => Ok(CellTask {
                    feature,
                    layer,
                    task,
                    seed: cell_seed(cfg.seed, fi, li),
                }),
                Err(e) => Err((feature, layer, e.to_string())),
            });
        }
    }
    drop(shared);

    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let records_path = cfg.output_dir.join("records.jsonl");
    let mut records_out = BufWriter::new(File::create(&records_path)?);
    let mut timings_out = BufWriter::new(File::create(cfg.output_dir.join("timings.jsonl"))?);

    let units: Vec<Unit> = (0..cells.len())
        .flat_map(|cell| cfg.methods.iter().map(move |&method| Unit { cell, method }))
        .collect();
    let pools: Vec<OnceLock<std::result::Result<Vec<usize>, String>>> =
        cells.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.workers.max(1).min(units.len().max(1));

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let outcome: Result<()> = thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Vec<ExperimentRecord>, Option<MethodTiming>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (units, cells, pools, next) = (&units, &cells, &pools, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(unit) = units.get(i) else { break };
                let result = run_unit(unit, &cells[unit.cell], &pools[unit.cell], cfg);
                if tx.send((i, result.0, result.1)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // emit in grid order as soon as the next unit is ready
        let mut pending = BTreeMap::new();
        let mut emitted = 0;
        for (i, recs, timing) in rx {
            pending.insert(i, (recs, timing));
            while let Some((recs, timing)) = pending.remove(&emitted) {
                for r in &recs {
                    serde_json::to_writer(&mut records_out, r)?;
                    records_out.write_all(b"\n")?;
                }
                records_out.flush()?;
                if let Some(t) = &timing {
                    serde_json::to_writer(&mut timings_out, t)?;
                    timings_out.write_all(b"\n")?;
                    timings_out.flush()?;
                }
                records.extend(recs);
                timings.extend(timing);
                emitted += 1;
            }
        }
        Ok(())
    });
    outcome?;
    Ok(RunOutcome {
        plan,
        records,
        timings,
        records_path: Some(records_path),
    })
}

fn run_unit(
    unit: &Unit,
    cell: &std::result::Result<CellTask, (String, i32, String)>,
    pool: &OnceLock<std::result::Result<Vec<usize>, String>>,
    cfg: &ExperimentConfig,
) -> (Vec<ExperimentRecord>, Option<MethodTiming>) {
    let fail_all = |feature: &str, layer: i32, reason: &str| {
        cfg.k_grid
            .iter()
            .map(|&k| ExperimentRecord {
                feature: feature.to_owned(),
                layer,
                method: unit.method,
                k,
                status: CellStatus::Failed,
                reason: Some(reason.to_owned()),
                probe: None,
                report: None,
                osp: None,
            })
            .collect()
    };
    let task = match cell {
        Ok(t) => t,
        Err((feature, layer, reason)) => return (fail_all(feature, *layer, reason), None),
    };
    let pool = pool.get_or_init(|| {
        Cell::prepare(task, &cfg.settings)
            .map(|c| c.pool)
            .map_err(|e| e.to_string())
    });
    match pool {
        Ok(pool) => {
            let prepared = Cell {
                cell: task,
                pool: pool.clone(),
            };
            let (recs, timing) = prepared.run_method(unit.method, &cfg.k_grid, &cfg.settings);
            (recs, Some(timing))
        }
        Err(reason) => (fail_all(&task.feature, task.layer, reason), None),
    }
}

/// Reads a JSON-lines record file, skipping blank lines.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Best layer per feature, averaged over features.
    MethodK,
    /// Mean over features at each layer.
    Layer,
    /// Best layer per feature.
    Feature,
}

impl Grouping {
    pub fn name(&self) -> &'static str {
        match self {
            Grouping::MethodK => "method_k",
            Grouping::Layer => "layer",
            Grouping::Feature => "feature",
        }
    }
}

impl FromStr for Grouping {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "method_k" | "method-k" | "method×k" => Ok(Grouping::MethodK),
            "layer" => Ok(Grouping::Layer),
            "feature" => Ok(Grouping::Feature),
            other => Err(ProbeError::InvalidArgument(format!(
                "unknown grouping {other:?} (expected method_k, layer or feature)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| ProbeError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Looks up a column of a row by header name.
    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.header.iter().position(|h| h == column)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Best-F1 record among `group`; ties keep the lowest layer.
fn best_layer<'a>(group: &[&'a ExperimentRecord]) -> Option<&'a ExperimentRecord> {
    group
        .iter()
        .copied()
        .filter(|r| r.report.is_some())
        .fold(None, |best: Option<&ExperimentRecord>, r| match best {
            Some(b) if b.f1() > r.f1() || (b.f1() == r.f1() && b.layer <= r.layer) => Some(b),
            _ => Some(r),
        })
}

const METRICS: [&str; 5] = ["f1", "precision", "recall", "mcc", "test_loss"];

fn metric(r: &ExperimentRecord, name: &str) -> f64 {
    let rep = r.report.as_ref().expect("only successful records carry metrics");
    match name {
        "f1" => rep.f1,
        "precision" => rep.precision,
        "recall" => rep.recall,
        "mcc" => rep.mcc,
        _ => rep.logistic_loss,
    }
}

/// Aggregates records into one of three plot-ready tables.
pub fn summarize(records: &[ExperimentRecord], grouping: Grouping) -> Result<SummaryTable> {
    if records.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let counts = |g: &[&ExperimentRecord]| {
        let ok = g.iter().filter(|r| r.is_ok()).count();
        (ok.to_string(), (g.len() - ok).to_string())
    };
    let mut header: Vec<String>;
    let mut rows = Vec::new();
    match grouping {
        Grouping::MethodK => {
            header = vec!["method".into(), "k".into(), "features".into(), "ok".into(), "failed".into()];
            let mut groups: BTreeMap<(ProbeMethod, usize), BTreeMap<&str, Vec<&ExperimentRecord>>> =
                BTreeMap::new();
            for r in records {
                groups
                    .entry((r.method, r.k))
                    .or_default()
                    .entry(&r.feature)
                    .or_default()
                    .push(r);
            }
            for ((method, k), by_feature) in groups {
                let all: Vec<&ExperimentRecord> = by_feature.values().flatten().copied().collect();
                let (ok, failed) = counts(&all);
                let best: Option<Vec<&ExperimentRecord>> =
                    by_feature.values().map(|g| best_layer(g)).collect();
                let mut row = vec![
                    method.name().to_owned(),
                    k.to_string(),
                    by_feature.len().to_string(),
                    ok,
                    failed,
                ];
                for m in METRICS {
                    let v = best.as_ref().and_then(|b| {
                        mean(&b.iter().map(|r| metric(r, m)).collect::<Vec<_>>())
                    });
                    row.push(fmt_opt(v));
                }
                rows.push(row);
            }
        }
        Grouping::Layer => {
            header = vec![
                "layer".into(),
                "method".into(),
                "k".into(),
                "features".into(),
                "ok".into(),
                "failed".into(),
            ];
            let mut groups: BTreeMap<(i32, ProbeMethod, usize), Vec<&ExperimentRecord>> =
                BTreeMap::new();
            for r in records {
                groups.entry((r.layer, r.method, r.k)).or_default().push(r);
            }
            for ((layer, method, k), g) in groups {
                let (ok, failed) = counts(&g);
                let features: BTreeSet<&str> = g.iter().map(|r| r.feature.as_str()).collect();
                let mut row = vec![
                    layer.to_string(),
                    method.name().to_owned(),
                    k.to_string(),
                    features.len().to_string(),
                    ok,
                    failed,
                ];
                let good: Vec<&ExperimentRecord> = g.iter().copied().filter(|r| r.is_ok()).collect();
                for m in METRICS {
                    row.push(fmt_opt(mean(&good.iter().map(|r| metric(r, m)).collect::<Vec<_>>())));
                }
                rows.push(row);
            }
        }
        Grouping::Feature => {
            header = vec![
                "feature".into(),
                "method".into(),
                "k".into(),
                "best_layer".into(),
                "ok".into(),
                "failed".into(),
            ];
            let mut groups: BTreeMap<(&str, ProbeMethod, usize), Vec<&ExperimentRecord>> =
                BTreeMap::new();
            for r in records {
                groups.entry((&r.feature, r.method, r.k)).or_default().push(r);
            }
            for ((feature, method, k), g) in groups {
                let (ok, failed) = counts(&g);
                let best = best_layer(&g);
                let mut row = vec![
                    feature.to_owned(),
                    method.name().to_owned(),
                    k.to_string(),
                    best.map(|r| r.layer.to_string()).unwrap_or_default(),
                    ok,
                    failed,
                ];
                for m in METRICS {
                    row.push(fmt_opt(best.map(|r| metric(r, m))));
                }
                rows.push(row);
            }
        }
    }
    header.extend(METRICS.iter().map(|m| m.to_string()));
    Ok(SummaryTable { header, rows })
}

/// Writes `summary_<grouping>.csv` into `dir` and returns its path.
pub fn write_summary(table: &SummaryTable, grouping: Grouping, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("summary_{}.csv", grouping.name()));
    fs::write(&path, table.to_csv()?)?;
    Ok(path)
}
