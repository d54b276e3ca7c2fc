//! One probing cell: prefilter a (feature, layer) task once, let every method
//! choose supports for each k, retrain logistic probes on those supports and
//! evaluate them on the held-out split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::osp::{solve_osp_on_pool, OspConfig, OspStatus};
use crate::probe::{adaptive_threshold_sweep, default_schedule, train_logistic, SparseProbe, TrainConfig};
use crate::scoring::{
    prefilter_top_m, score_f_statistic, score_l1_logistic, score_mean_difference,
    score_mutual_information, score_random, SelectionResult, DEFAULT_MI_NEIGHBORS,
};
use crate::store::ProbeTask;

/// A way of choosing a k-sparse support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    MeanDiff,
    FStat,
    MutualInfo,
    L1Logistic,
    Random,
    Osp,
    AdaptiveThreshold,
}

impl ProbeMethod {
    pub const ALL: [ProbeMethod; 7] = [
        ProbeMethod::MeanDiff,
        ProbeMethod::FStat,
        ProbeMethod::MutualInfo,
        ProbeMethod::L1Logistic,
        ProbeMethod::Random,
        ProbeMethod::Osp,
        ProbeMethod::AdaptiveThreshold,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProbeMethod::MeanDiff => "mean_diff",
            ProbeMethod::FStat => "f_stat",
            ProbeMethod::MutualInfo => "mutual_info",
            ProbeMethod::L1Logistic => "l1_logistic",
            ProbeMethod::Random => "random",
            ProbeMethod::Osp => "osp",
            ProbeMethod::AdaptiveThreshold => "adaptive_threshold",
        }
    }
}

fn default_prefilter_m() -> usize {
    1024
}

fn default_mi_neighbors() -> usize {
    DEFAULT_MI_NEIGHBORS
}

fn default_l1_strength() -> f64 {
    1e-2
}

/// Method hyperparameters shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    #[serde(default = "default_prefilter_m")]
    pub prefilter_m: usize,
    #[serde(default = "default_mi_neighbors")]
    pub mi_neighbors: usize,
    /// L1 strength of the dense probe used for L1 scoring.
    #[serde(default = "default_l1_strength")]
    pub l1_strength: f64,
    /// Adaptive-thresholding steps; the k grid is merged in.
    #[serde(default = "default_schedule")]
    pub schedule: Vec<usize>,
    #[serde(default)]
    pub osp: OspConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            prefilter_m: default_prefilter_m(),
            mi_neighbors: default_mi_neighbors(),
            l1_strength: default_l1_strength(),
            schedule: default_schedule(),
            osp: OspConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// What a cell recorded about the fitted probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// Neurons the method selected (sorted).
    pub selected: Vec<usize>,
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub k: usize,
}

impl ProbeSummary {
    fn new(selected: Vec<usize>, probe: &SparseProbe) -> Self {
        ProbeSummary {
            selected,
            support: probe.support.clone(),
            weights: probe.weights.clone(),
            bias: probe.bias,
            converged: probe.converged,
            k: probe.k,
        }
    }
}

/// Solver facts for optimal sparse probing cells. Wall time is left out so
/// records stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OspSummary {
    pub objective: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub status: OspStatus,
    pub cuts_generated: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One (feature, layer, method, k) grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub feature: String,
    pub layer: i32,
    pub method: ProbeMethod,
    pub k: usize,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub osp: Option<OspSummary>,
}

impl ExperimentRecord {
    fn failed(feature: &str, layer: i32, method: ProbeMethod, k: usize, reason: String) -> Self {
        ExperimentRecord {
            feature: feature.to_owned(),
            layer,
            method,
            k,
            status: CellStatus::Failed,
            reason: Some(reason),
            probe: None,
            report: None,
            osp: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn f1(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.f1)
    }
}

/// Wall-clock cost of one method on one cell, kept apart from the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub feature: String,
    pub layer: i32,
    pub method: ProbeMethod,
    pub wall_time_secs: f64,
}

/// A labelled task tagged with where it came from.
#[derive(Debug, Clone)]
pub struct CellTask {
    pub feature: String,
    pub layer: i32,
    pub task: ProbeTask,
    /// Seed for the random baseline.
    pub seed: u64,
}

/// Shared per-cell state: the task and its mean-difference prefilter.
pub struct Cell<'a> {
    pub cell: &'a CellTask,
    pub pool: Vec<usize>,
}

impl<'a> Cell<'a> {
    /// Ranks neurons by train-split mean difference and keeps the top
    /// `prefilter_m` (clipped to the neuron count).
    pub fn prepare(cell: &'a CellTask, settings: &MethodSettings) -> Result<Self> {
        let m = settings.prefilter_m.min(cell.task.n_neurons());
        let pool = prefilter_top_m(&score_mean_difference(&cell.task), m)?;
        Ok(Cell { cell, pool })
    }

    /// All records for one method over `k_grid`, plus its timing.
    pub fn run_method(
        &self,
        method: ProbeMethod,
        k_grid: &[usize],
        settings: &MethodSettings,
    ) -> (Vec<ExperimentRecord>, MethodTiming) {
        let start = Instant::now();
        let records = match self.dispatch(method, k_grid, settings) {
            Ok(r) => r,
            Err(e) => k_grid
                .iter()
                .map(|&k| self.failure(method, k, e.to_string()))
                .collect(),
        };
        let timing = MethodTiming {
            feature: self.cell.feature.clone(),
            layer: self.cell.layer,
            method,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        (records, timing)
    }

    fn failure(&self, method: ProbeMethod, k: usize, reason: String) -> ExperimentRecord {
        ExperimentRecord::failed(&self.cell.feature, self.cell.layer, method, k, reason)
    }

    fn success(
        &self,
        method: ProbeMethod,
        k: usize,
        selected: Vec<usize>,
        probe: &SparseProbe,
        report: EvalReport,
    ) -> ExperimentRecord {
        ExperimentRecord {
            feature: self.cell.feature.clone(),
            layer: self.cell.layer,
            method,
            k,
            status: CellStatus::Ok,
            reason: None,
            probe: Some(ProbeSummary::new(selected, probe)),
            report: Some(report),
            osp: None,
        }
    }

    fn retrain(
        &self,
        method: ProbeMethod,
        k: usize,
        mut selected: Vec<usize>,
        train: &TrainConfig,
    ) -> ExperimentRecord {
        selected.sort_unstable();
        let task = &self.cell.task;
        match train_logistic(task, &selected, train).and_then(|p| Ok((evaluate(&p, task)?, p))) {
            Ok((report, probe)) => self.success(method, k, selected, &probe, report),
            Err(e) => self.failure(method, k, e.to_string()),
        }
    }

    fn dispatch(
        &self,
        method: ProbeMethod,
        k_grid: &[usize],
        settings: &MethodSettings,
    ) -> Result<Vec<ExperimentRecord>> {
        let task = &self.cell.task;
        let ranking = match method {
            ProbeMethod::Osp => return Ok(self.run_osp(k_grid, settings)),
            ProbeMethod::AdaptiveThreshold => return self.run_adaptive(k_grid, settings),
            ProbeMethod::MeanDiff => self.pool.clone(),
            ProbeMethod::Random => {
                let sub = task.select_columns(&self.pool)?;
                self.to_task_indices(&score_random(&sub, self.cell.seed))
            }
            ProbeMethod::FStat => {
                let sub = task.select_columns(&self.pool)?;
                self.to_task_indices(&score_f_statistic(&sub)?)
            }
            ProbeMethod::MutualInfo => {
                let sub = task.select_columns(&self.pool)?;
                self.to_task_indices(&score_mutual_information(&sub, settings.mi_neighbors)?)
            }
            ProbeMethod::L1Logistic => {
                let sub = task.select_columns(&self.pool)?;
                self.to_task_indices(&score_l1_logistic(&sub, settings.l1_strength, &settings.train)?)
            }
        };
        Ok(k_grid
            .iter()
            .map(|&k| {
                if k == 0 || k > ranking.len() {
                    return self.failure(
                        method,
                        k,
                        format!("k = {k} outside the {} prefiltered neurons", ranking.len()),
                    );
                }
                self.retrain(method, k, ranking[..k].to_vec(), &settings.train)
            })
            .collect())
    }

    fn to_task_indices(&self, result: &SelectionResult) -> Vec<usize> {
        result.ranking.iter().map(|&c| self.pool[c]).collect()
    }

    fn run_osp(&self, k_grid: &[usize], settings: &MethodSettings) -> Vec<ExperimentRecord> {
        let pool_size = settings.osp.candidate_pool.min(self.pool.len());
        let pool = &self.pool[..pool_size];
        k_grid
            .iter()
            .map(|&k| {
                let cfg = OspConfig {
                    k,
                    candidate_pool: pool_size,
                    ..settings.osp.clone()
                };
                let solved = cfg
                    .validate()
                    .and_then(|_| solve_osp_on_pool(&self.cell.task, pool, &cfg));
                match solved {
                    Ok(result) => {
                        let mut rec = self.retrain(
                            ProbeMethod::Osp,
                            k,
                            result.support.clone(),
                            &settings.train,
                        );
                        rec.osp = Some(OspSummary {
                            objective: result.objective,
                            lower_bound: result.lower_bound,
                            gap: result.gap,
                            status: result.status,
                            cuts_generated: result.cuts_generated,
                            gamma: result.gamma,
                        });
                        rec
                    }
                    Err(e) => self.failure(ProbeMethod::Osp, k, e.to_string()),
                }
            })
            .collect()
    }

    fn run_adaptive(
        &self,
        k_grid: &[usize],
        settings: &MethodSettings,
    ) -> Result<Vec<ExperimentRecord>> {
        let method = ProbeMethod::AdaptiveThreshold;
        let available = self.pool.len();
        let mut schedule: Vec<usize> = settings
            .schedule
            .iter()
            .chain(k_grid)
            .copied()
            .filter(|&k| k >= 1 && k <= available)
            .collect();
        schedule.sort_unstable_by(|a, b| b.cmp(a));
        schedule.dedup();
        let steps = adaptive_threshold_sweep(&self.cell.task, &self.pool, &schedule, &settings.train)?;
        let by_k: BTreeMap<usize, _> = steps.into_iter().map(|s| (s.k, s)).collect();
        Ok(k_grid
            .iter()
            .map(|&k| match by_k.get(&k) {
                Some(step) => match (&step.probe, &step.report) {
                    (Some(probe), Some(report)) => {
                        self.success(method, k, step.support.clone(), probe, *report)
                    }
                    _ => self.failure(
                        method,
                        k,
                        step.error.clone().unwrap_or_else(|| "step failed".into()),
                    ),
                },
                None => self.failure(
                    method,
                    k,
                    format!("k = {k} outside the {available} prefiltered neurons"),
                ),
            })
            .collect())
    }
}

/// Records and timings for every method on one cell. A prefilter failure
/// fails every cell of the grid.
pub fn run_cell(
    cell: &CellTask,
    methods: &[ProbeMethod],
    k_grid: &[usize],
    settings: &MethodSettings,
) -> (Vec<ExperimentRecord>, Vec<MethodTiming>) {
    let prepared = match Cell::prepare(cell, settings) {
        Ok(c) => c,
        Err(e) => {
            let reason = e.to_string();
            let reason = &reason;
            let records = methods
                .iter()
                .flat_map(|&m| {
                    k_grid.iter().map(move |&k| {
                        ExperimentRecord::failed(&cell.feature, cell.layer, m, k, reason.clone())
                    })
                })
                .collect();
            return (records, Vec::new());
        }
    };
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for &m in methods {
        let (r, t) = prepared.run_method(m, k_grid, settings);
        records.extend(r);
        timings.push(t);
    }
    (records, timings)
}

/// Per-feature best F1 over layers, then the mean over features. `None` when
/// some feature has no successful layer.
pub fn layer_max_feature_mean<'a>(
    records: impl IntoIterator<Item = &'a ExperimentRecord>,
) -> Option<f64> {
    let mut best: BTreeMap<&str, Option<f64>> = BTreeMap::new();
    for r in records {
        let slot = best.entry(r.feature.as_str()).or_insert(None);
        if let Some(f1) = r.f1() {
            *slot = Some(slot.map_or(f1, |b: f64| b.max(f1)));
        }
    }
    if best.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for v in best.values() {
        sum += (*v)?;
    }
    Some(sum / best.len() as f64)
}

/// A Table-3-shaped comparison: one row per method, one F1 column per k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub k_grid: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: ProbeMethod,
    /// Layer-max, feature-mean F1 per k; `None` marks a null cell.
    pub f1: Vec<Option<f64>>,
    /// Why each null cell is null.
    pub reasons: Vec<Option<String>>,
    pub wall_time_secs: f64,
}

impl ComparisonTable {
    pub fn row(&self, method: ProbeMethod) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn cell(&self, method: ProbeMethod, k: usize) -> Option<f64> {
        let col = self.k_grid.iter().position(|&g| g == k)?;
        self.row(method)?.f1[col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for k in &self.k_grid {
            let _ = write!(out, ",k={k}");
        }
        out.push_str(",wall_time_secs\n");
        for row in &self.rows {
            out.push_str(row.method.name());
            for v in &row.f1 {
                match v {
                    Some(f) => {
                        let _ = write!(out, ",{f:.6}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:.6}", row.wall_time_secs);
        }
        out
    }
}

/// Runs every method over every task and aggregates F1 as the maximum over
/// layers averaged over features.
pub fn method_comparison(
    tasks: &[CellTask],
    methods: &[ProbeMethod],
    k_grid: &[usize],
    settings: &MethodSettings,
) -> Result<ComparisonTable> {
    if let Some(&bad) = k_grid.iter().find(|&&k| k == 0 || k > settings.prefilter_m) {
        return Err(ProbeError::InvalidArgument(format!(
            "k = {bad} outside 1..={}",
            settings.prefilter_m
        )));
    }
    let mut records = Vec::new();
    let mut time: BTreeMap<ProbeMethod, f64> = BTreeMap::new();
    if !methods.is_empty() {
        for cell in tasks {
            let (r, t) = run_cell(cell, methods, k_grid, settings);
            records.extend(r);
            for timing in t {
                *time.entry(timing.method).or_default() += timing.wall_time_secs;
            }
        }
    }
    let rows = methods
        .iter()
        .map(|&method| {
            let mut f1 = Vec::with_capacity(k_grid.len());
            let mut reasons = Vec::with_capacity(k_grid.len());
            for &k in k_grid {
                let group: Vec<&ExperimentRecord> = records
                    .iter()
                    .filter(|r| r.method == method && r.k == k)
                    .collect();
                let value = layer_max_feature_mean(group.iter().copied());
                let reason = if value.is_none() {
                    Some(
                        group
                            .iter()
                            .find_map(|r| r.reason.clone())
                            .unwrap_or_else(|| "no tasks".into()),
                    )
                } else {
                    None
                };
                f1.push(value);
                reasons.push(reason);
            }
            ComparisonRow {
                method,
                f1,
                reasons,
                wall_time_secs: time.get(&method).copied().unwrap_or(0.0),
            }
        })
        .collect();
    Ok(ComparisonTable {
        k_grid: k_grid.to_vec(),
        rows,
    })
}
