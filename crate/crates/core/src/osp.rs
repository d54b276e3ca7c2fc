//! Optimal sparse probing: a cardinality-constrained hinge-loss SVM solved to
//! provable optimality by outer approximation.
//!
//! For a support indicator `s`, the ridge-regularized SVM restricted to the
//! support has the dual value
//!
//! `c(s) = max_{0 ≤ α ≤ C} Σᵢ αᵢ − (γ/2) Σⱼ sⱼ (Σᵢ αᵢ yᵢ xᵢⱼ)²`
//!
//! which is convex and non-increasing in `s`. Every evaluated support adds
//! the linear under-estimator `f_α(s)` at its optimal `α` as a cut; the master
//! problem `min η s.t. η ≥ cuts, Σs = k` is solved exactly by depth-first
//! branch and bound. The loop stops once the master lower bound meets the best
//! evaluated support.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::probe::{train_logistic, SparseProbe, Standardization, TrainConfig};
use crate::scoring::score_mean_difference;
use crate::store::ProbeTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OspConfig {
    pub k: usize,
    /// Ridge strength γ; larger values regularize less.
    pub gamma: f64,
    pub timeout_secs: f64,
    pub candidate_pool: usize,
    /// Tolerance on both the inner duality gap and the outer bound gap.
    pub inner_tolerance: f64,
    /// Standardize pool columns on the training rows before solving.
    pub standardize: bool,
    /// Cap on coordinate-ascent sweeps per inner solve.
    pub max_inner_sweeps: usize,
    /// Optional cap on generated cuts. Unlike the timeout it stops every run
    /// at the same point, so results stay reproducible.
    pub max_cuts: Option<usize>,
}

impl Default for OspConfig {
    fn default() -> Self {
        OspConfig {
            k: 1,
            gamma: 0.1,
            timeout_secs: 60.0,
            candidate_pool: 50,
            inner_tolerance: 1e-6,
            standardize: true,
            max_inner_sweeps: 100_000,
            max_cuts: None,
        }
    }
}

impl OspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.candidate_pool {
            return Err(ProbeError::InvalidArgument(format!(
                "k = {} must lie in 1..={}",
                self.k, self.candidate_pool
            )));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(ProbeError::InvalidArgument("timeout must be positive".into()));
        }
        if !(self.gamma > 0.0) || !(self.inner_tolerance > 0.0) {
            return Err(ProbeError::InvalidArgument(
                "gamma and inner_tolerance must be positive".into(),
            ));
        }
        if self.max_cuts == Some(0) {
            return Err(ProbeError::InvalidArgument("max_cuts must be ≥ 1".into()));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::try_from_secs_f64(self.timeout_secs).unwrap_or(Duration::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OspStatus {
    ProvenOptimal,
    /// Stopped by the timeout or the cut budget; `gap` bounds the loss.
    TimeoutIncumbent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OspResult {
    /// Selected neurons (task column indices, sorted).
    pub support: Vec<usize>,
    /// `c(support)`, the best evaluated dual value.
    pub objective: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub status: OspStatus,
    pub cuts_generated: usize,
    pub wall_time_secs: f64,
    pub gamma: f64,
    pub k: usize,
    /// `(incumbent, lower bound)` after each master solve.
    #[serde(default)]
    pub bounds: Vec<(f64, f64)>,
}

/// Dual optimum for one support together with its cut.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub value: f64,
    /// `∂c/∂sⱼ = −(γ/2)(Σᵢ αᵢ yᵢ xᵢⱼ)²` for every column.
    pub subgradient: Vec<f64>,
    pub alpha: Vec<f64>,
    pub duality_gap: f64,
}

/// Training rows of a column subset, row-major, plus labels and caps.
struct SvmData {
    x: Vec<f64>,
    n: usize,
    p: usize,
    y: Vec<f64>,
    caps: Vec<f64>,
}

impl SvmData {
    fn new(task: &ProbeTask, cols: &[usize], standardize: bool) -> Self {
        let train = task.train();
        let p = cols.len();
        let feats = task.features();
        let stds: Vec<Option<Standardization>> = cols
            .iter()
            .map(|&j| standardize.then(|| Standardization::fit(&task.train_column(j))))
            .collect();
        let mut x = Vec::with_capacity(train.len() * p);
        for &i in train {
            for (&j, st) in cols.iter().zip(&stds) {
                let v = f64::from(feats[[i, j]]);
                x.push(st.map_or(v, |s| s.apply(v)));
            }
        }
        SvmData {
            x,
            n: train.len(),
            p,
            y: train.iter().map(|&i| f64::from(task.labels()[i])).collect(),
            caps: train.iter().map(|&i| task.weight(i)).collect(),
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.p + j]
    }

    /// Projected coordinate ascent on the box-constrained dual restricted to
    /// `active`, warm-started from `alpha`, until the duality gap drops below
    /// `gap_target`.
    fn solve(
        &self,
        active: &[usize],
        gamma: f64,
        alpha: &mut [f64],
        gap_target: f64,
        max_sweeps: usize,
    ) -> Result<(f64, f64)> {
        let m = active.len();
        let rows: Vec<f64> = (0..self.n)
            .flat_map(|i| active.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.at(i, j))
            .collect();
        let sq: Vec<f64> = rows.chunks_exact(m).map(|r| r.iter().map(|v| v * v).sum()).collect();
        for (a, c) in alpha.iter_mut().zip(&self.caps) {
            *a = a.clamp(0.0, *c);
        }
        let mut v = vec![0.0; m];
        for i in 0..self.n {
            if alpha[i] != 0.0 {
                for (vj, xij) in v.iter_mut().zip(&rows[i * m..(i + 1) * m]) {
                    *vj += alpha[i] * self.y[i] * xij;
                }
            }
        }
        let mut last = (0.0, f64::INFINITY);
        for _ in 0..max_sweeps {
            for i in 0..self.n {
                let xi = &rows[i * m..(i + 1) * m];
                let new = if sq[i] == 0.0 {
                    self.caps[i]
                } else {
                    let dot: f64 = xi.iter().zip(&v).map(|(a, b)| a * b).sum();
                    let grad = 1.0 - gamma * self.y[i] * dot;
                    (alpha[i] + grad / (gamma * sq[i])).clamp(0.0, self.caps[i])
                };
                let delta = new - alpha[i];
                if delta != 0.0 {
                    alpha[i] = new;
                    for (vj, xij) in v.iter_mut().zip(xi) {
                        *vj += delta * self.y[i] * xij;
                    }
                }
            }
            let vv: f64 = v.iter().map(|a| a * a).sum();
            let dual = alpha.iter().sum::<f64>() - 0.5 * gamma * vv;
            let hinge: f64 = (0..self.n)
                .map(|i| {
                    let dot: f64 = rows[i * m..(i + 1) * m]
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| a * b)
                        .sum();
                    self.caps[i] * (1.0 - gamma * self.y[i] * dot).max(0.0)
                })
                .sum();
            let primal = hinge + 0.5 * gamma * vv;
            let gap = (primal - dual).max(0.0);
            last = (dual, gap);
            if gap <= gap_target {
                return Ok(last);
            }
        }
        Err(ProbeError::InnerSolverFailure(format!(
            "duality gap {:e} above {gap_target:e} after {max_sweeps} sweeps",
            last.1
        )))
    }

    /// `Σᵢ αᵢ yᵢ xᵢⱼ` for every column.
    fn correlations(&self, alpha: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.p];
        for i in 0..self.n {
            if alpha[i] == 0.0 {
                continue;
            }
            let ay = alpha[i] * self.y[i];
            for (uj, xij) in u.iter_mut().zip(&self.x[i * self.p..(i + 1) * self.p]) {
                *uj += ay * xij;
            }
        }
        u
    }

    fn evaluate(
        &self,
        active: &[usize],
        cfg: &OspConfig,
        warm: Option<&[f64]>,
    ) -> Result<InnerSolution> {
        let mut alpha = warm.map_or_else(|| vec![0.0; self.n], <[f64]>::to_vec);
        let (value, duality_gap) = self.solve(
            active,
            cfg.gamma,
            &mut alpha,
            cfg.inner_tolerance * 1e-2,
            cfg.max_inner_sweeps,
        )?;
        let subgradient = self
            .correlations(&alpha)
            .into_iter()
            .map(|u| -0.5 * cfg.gamma * u * u)
            .collect();
        Ok(InnerSolution {
            value,
            subgradient,
            alpha,
            duality_gap,
        })
    }
}

/// Support-restricted ridge-SVM dual value `c(s)` and its subgradient over
/// all task columns.
pub fn inner_dual_value(
    task: &ProbeTask,
    support_indicator: &[bool],
    cfg: &OspConfig,
) -> Result<InnerSolution> {
    let d = task.n_neurons();
    if support_indicator.len() != d {
        return Err(ProbeError::InvalidArgument(format!(
            "indicator has {} entries for {d} columns",
            support_indicator.len()
        )));
    }
    let active: Vec<usize> = (0..d).filter(|&j| support_indicator[j]).collect();
    if active.is_empty() {
        return Err(ProbeError::InvalidArgument(
            "support indicator has no active coordinate".into(),
        ));
    }
    let cols: Vec<usize> = (0..d).collect();
    SvmData::new(task, &cols, cfg.standardize).evaluate(&active, cfg, None)
}

struct Cut {
    constant: f64,
    coef: Vec<f64>,
    /// Pool positions sorted by ascending coefficient.
    order: Vec<usize>,
}

impl Cut {
    fn new(sol: &InnerSolution, active: &[usize]) -> Self {
        let constant = sol.value - active.iter().map(|&j| sol.subgradient[j]).sum::<f64>();
        let mut order: Vec<usize> = (0..sol.subgradient.len()).collect();
        order.sort_by(|&a, &b| sol.subgradient[a].total_cmp(&sol.subgradient[b]).then(a.cmp(&b)));
        Cut {
            constant,
            coef: sol.subgradient.clone(),
            order,
        }
    }

    fn at(&self, support: &[usize]) -> f64 {
        self.constant + support.iter().map(|&j| self.coef[j]).sum::<f64>()
    }
}

/// Depth-first branch and bound for `min_{|S| = k} max_t cut_t(S)`.
struct Master<'a> {
    cuts: &'a [Cut],
    k: usize,
    /// Branching order over pool positions.
    var_order: Vec<usize>,
    /// `decided[j]` once position j's branch variable is fixed.
    decided: Vec<bool>,
    chosen: Vec<usize>,
    partial: Vec<f64>,
    best: f64,
    best_set: Option<Vec<usize>>,
    deadline: Instant,
    nodes: u64,
    timed_out: bool,
}

impl<'a> Master<'a> {
    fn bound(&self) -> f64 {
        let need = self.k - self.chosen.len();
        let mut lb = f64::NEG_INFINITY;
        for (cut, base) in self.cuts.iter().zip(&self.partial) {
            let mut val = *base;
            let mut taken = 0;
            for &j in &cut.order {
                if taken == need {
                    break;
                }
                if !self.decided[j] {
                    val += cut.coef[j];
                    taken += 1;
                }
            }
            lb = lb.max(val);
        }
        lb
    }

    fn search(&mut self, depth: usize) {
        if self.timed_out {
            return;
        }
        self.nodes += 1;
        if self.nodes % 1024 == 0 && Instant::now() >= self.deadline {
            self.timed_out = true;
            return;
        }
        if self.chosen.len() == self.k {
            let val = self.partial.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if val < self.best {
                self.best = val;
                let mut set = self.chosen.clone();
                set.sort_unstable();
                self.best_set = Some(set);
            }
            return;
        }
        let free = self.var_order.len() - depth;
        if free < self.k - self.chosen.len() {
            return;
        }
        if self.bound() >= self.best {
            return;
        }
        let j = self.var_order[depth];
        self.decided[j] = true;
        // include
        self.chosen.push(j);
        for (p, cut) in self.partial.iter_mut().zip(self.cuts) {
            *p += cut.coef[j];
        }
        self.search(depth + 1);
        for (p, cut) in self.partial.iter_mut().zip(self.cuts) {
            *p -= cut.coef[j];
        }
        self.chosen.pop();
        // exclude
        self.search(depth + 1);
        self.decided[j] = false;
    }
}

/// Returns `(value, support)` or `None` on timeout.
fn solve_master(
    cuts: &[Cut],
    p: usize,
    k: usize,
    incumbent: &[usize],
    deadline: Instant,
) -> Option<(f64, Vec<usize>)> {
    let last = cuts.last().expect("at least one cut");
    let mut m = Master {
        cuts,
        k,
        var_order: last.order.clone(),
        decided: vec![false; p],
        chosen: Vec::with_capacity(k),
        partial: cuts.iter().map(|c| c.constant).collect(),
        best: cuts.iter().map(|c| c.at(incumbent)).fold(f64::NEG_INFINITY, f64::max),
        best_set: Some(incumbent.to_vec()),
        deadline,
        nodes: 0,
        timed_out: false,
    };
    // ties with the seeded incumbent keep the incumbent
    m.search(0);
    if m.timed_out {
        return None;
    }
    Some((m.best, m.best_set.expect("incumbent seeded")))
}

fn lex_less(a: &[usize], b: &[usize]) -> bool {
    a < b
}

/// Cutting-plane solve over an explicit candidate pool (task column indices).
pub fn solve_osp_on_pool(task: &ProbeTask, pool: &[usize], cfg: &OspConfig) -> Result<OspResult> {
    let start = Instant::now();
    let deadline = start.checked_add(cfg.timeout()).unwrap_or(start + Duration::from_secs(86400 * 365));
    if pool.is_empty() {
        return Err(ProbeError::EmptyPool);
    }
    let d = task.n_neurons();
    if let Some(&bad) = pool.iter().find(|&&j| j >= d) {
        return Err(ProbeError::SupportOutOfRange { index: bad, cols: d });
    }
    let k = cfg.k.min(pool.len());
    let data = SvmData::new(task, pool, cfg.standardize);
    let to_task = |set: &[usize]| -> Vec<usize> {
        let mut s: Vec<usize> = set.iter().map(|&p| pool[p]).collect();
        s.sort_unstable();
        s
    };

    let mut cuts: Vec<Cut> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut current: Vec<usize> = (0..k).collect();
    let mut warm: Option<Vec<f64>> = None;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut lower = 0.0f64;
    let mut bounds = Vec::new();
    let status;
    loop {
        let sol = data.evaluate(&current, cfg, warm.as_deref())?;
        seen.insert(current.clone());
        cuts.push(Cut::new(&sol, &current));
        let better = match &best {
            None => true,
            Some((val, set)) => {
                sol.value < *val - 1e-12
                    || (sol.value <= *val + 1e-12 && lex_less(&to_task(&current), &to_task(set)))
            }
        };
        if better {
            best = Some((sol.value, current.clone()));
        }
        warm = Some(sol.alpha);
        let (ub, incumbent) = best.clone().expect("evaluated at least once");
        if Instant::now() >= deadline {
            status = OspStatus::TimeoutIncumbent;
            break;
        }
        let Some((master_val, next)) = solve_master(&cuts, pool.len(), k, &incumbent, deadline)
        else {
            status = OspStatus::TimeoutIncumbent;
            break;
        };
        lower = lower.max(master_val);
        bounds.push((ub, lower.min(ub)));
        if ub - lower <= cfg.inner_tolerance || seen.contains(&next) {
            status = OspStatus::ProvenOptimal;
            break;
        }
        if cfg.max_cuts.is_some_and(|m| cuts.len() >= m) {
            status = OspStatus::TimeoutIncumbent;
            break;
        }
        current = next;
    }
    let (objective, set) = best.expect("evaluated at least once");
    let lower = lower.min(objective);
    Ok(OspResult {
        support: to_task(&set),
        objective,
        lower_bound: lower,
        gap: (objective - lower).max(0.0),
        status,
        cuts_generated: cuts.len(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        gamma: cfg.gamma,
        k,
        bounds,
    })
}

/// Solves over the `candidate_pool` neurons with the largest absolute mean
/// difference.
pub fn solve_osp(task: &ProbeTask, cfg: &OspConfig) -> Result<OspResult> {
    cfg.validate()?;
    let ranking = score_mean_difference(task);
    let m = cfg.candidate_pool.min(task.n_neurons());
    if m == 0 {
        return Err(ProbeError::EmptyPool);
    }
    let pool = ranking.top(m).to_vec();
    solve_osp_on_pool(task, &pool, cfg)
}

/// Solves, then retrains a logistic probe on the selected support.
pub fn osp_probe(
    task: &ProbeTask,
    cfg: &OspConfig,
    train: &TrainConfig,
) -> Result<(OspResult, SparseProbe)> {
    let result = solve_osp(task, cfg)?;
    let probe = train_logistic(task, &result.support, train)?;
    Ok((result, probe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ClassWeights, Weighting};
    use ndarray::{array, Array2};
    use std::sync::Arc;

    fn raw(k: usize) -> OspConfig {
        OspConfig {
            k,
            standardize: false,
            inner_tolerance: 1e-9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_column_leaves_all_alphas_at_cap() {
        let x = array![[0.0f32, 1.0], [0.0, -1.0], [0.0, 2.0], [0.0, -2.0], [0.0, 0.5], [0.0, 0.1]];
        let labels = vec![1, -1, 1, -1, 1, -1];
        let w = ClassWeights {
            positive: 2.0,
            negative: 0.5,
        };
        let task =
            ProbeTask::from_parts(Arc::new(x), labels, w, vec![0, 1, 2, 3], vec![4, 5]).unwrap();
        let sol = inner_dual_value(&task, &[true, false], &raw(1)).unwrap();
        assert!((sol.value - (2.0 + 0.5 + 2.0 + 0.5)).abs() < 1e-9);
        assert!(sol.subgradient.iter().all(|&g| g <= 0.0));
    }

    #[test]
    fn subgradient_matches_formula() {
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        let labels: Vec<i8> = (0..12).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect();
        let task =
            ProbeTask::from_labels(Arc::new(x.clone()), labels, 0.25, 1, Weighting::Balanced)
                .unwrap();
        let cfg = raw(1);
        let sol = inner_dual_value(&task, &[true, false, false], &cfg).unwrap();
        for j in 0..3 {
            let u: f64 = task
                .train()
                .iter()
                .zip(&sol.alpha)
                .map(|(&i, a)| a * f64::from(task.labels()[i]) * f64::from(x[[i, j]]))
                .sum();
            assert!((sol.subgradient[j] + 0.5 * cfg.gamma * u * u).abs() < 1e-6);
        }
    }

    #[test]
    fn informative_column_is_selected() {
        let n = 40;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| match j {
            1 => {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            _ => ((i * 13 + j * 5) % 7) as f32 / 7.0,
        });
        let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let task =
            ProbeTask::from_labels(Arc::new(x), labels, 0.25, 3, Weighting::Balanced).unwrap();
        let res = solve_osp(&task, &OspConfig { k: 1, ..Default::default() }).unwrap();
        assert_eq!(res.support, vec![1]);
        assert_eq!(res.status, OspStatus::ProvenOptimal);
        assert!(res.gap <= 1e-6);
    }

    #[test]
    fn forced_timeout_reports_gap() {
        let x = Array2::from_shape_fn((30, 6), |(i, j)| ((i * (j + 2)) % 11) as f32);
        let labels: Vec<i8> = (0..30).map(|i| if i < 15 { 1 } else { -1 }).collect();
        let task =
            ProbeTask::from_labels(Arc::new(x), labels, 0.2, 0, Weighting::Balanced).unwrap();
        let cfg = OspConfig {
            k: 2,
            timeout_secs: 1e-9,
            ..Default::default()
        };
        let res = solve_osp(&task, &cfg).unwrap();
        assert_eq!(res.status, OspStatus::TimeoutIncumbent);
        assert!(res.gap > 0.0);
        assert_eq!(res.support.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(OspConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(OspConfig { k: 51, ..Default::default() }.validate().is_err());
        assert!(OspConfig { timeout_secs: 0.0, ..Default::default() }.validate().is_err());
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i + j) as f32);
        let labels = vec![1, 1, 1, 1, -1, -1, -1, -1];
        let task =
            ProbeTask::from_labels(Arc::new(x), labels, 0.25, 0, Weighting::Balanced).unwrap();
        assert!(matches!(
            solve_osp_on_pool(&task, &[], &OspConfig::default()),
            Err(ProbeError::EmptyPool)
        ));
    }
}
