//! Support-restricted logistic probes with elastic-net regularization.
//!
//! Probes are fitted on standardized support columns (train-split mean and
//! standard deviation) by a proximal Newton method: each outer step builds
//! the weighted quadratic model of the logistic loss, minimizes model + L1
//! by cyclic coordinate descent with soft thresholding, and backtracks on the
//! true objective. The bias is never penalized.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::serde_float;
use crate::store::ProbeTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l1: f64,
    pub l2: f64,
    /// Outer (Newton) iterations.
    pub max_iterations: usize,
    /// Sup-norm of the minimal-norm subgradient at which a fit counts as
    /// converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l1: 1e-3,
            l2: 1e-3,
            max_iterations: 200,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(ProbeError::InvalidArgument("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(ProbeError::InvalidArgument("max_iterations must be ≥ 1".into()));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return Err(ProbeError::InvalidArgument("penalties must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-column affine map captured at train time. A zero `scale` marks a
/// constant column, which standardizes to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 0.0 };
        Standardization { mean, scale }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            (x - self.mean) / self.scale
        }
    }
}

/// A linear classifier over a sparse set of neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbe {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(with = "serde_float")]
    pub threshold: f64,
    pub standardization: Vec<Standardization>,
    pub converged: bool,
    pub k: usize,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub gradient_norm: f64,
}

impl SparseProbe {
    /// Builds a probe directly from parts; `support` must be sorted and
    /// unique and every vector aligned with it.
    pub fn new(
        support: Vec<usize>,
        weights: Vec<f64>,
        bias: f64,
        standardization: Vec<Standardization>,
    ) -> Result<Self> {
        if weights.len() != support.len() || standardization.len() != support.len() {
            return Err(ProbeError::InvalidArgument(
                "support, weights and standardization lengths differ".into(),
            ));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProbeError::InvalidArgument(
                "support must be sorted and unique".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(ProbeError::InvalidArgument("non-finite probe parameters".into()));
        }
        let k = support.len();
        Ok(SparseProbe {
            support,
            weights,
            bias,
            threshold: 0.0,
            standardization,
            converged: true,
            k,
            iterations: 0,
            gradient_norm: 0.0,
        })
    }

    /// Logit for one raw activation row.
    pub fn logit(&self, row: impl Fn(usize) -> f64) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .zip(&self.standardization)
            .map(|((&j, w), st)| w * st.apply(row(j)))
            .sum::<f64>()
            + self.bias
    }

    fn check_columns(&self, cols: usize) -> Result<()> {
        match self.support.last() {
            Some(&max) if max >= cols => Err(ProbeError::SupportOutOfRange { index: max, cols }),
            _ => Ok(()),
        }
    }

    /// Logits for the given rows of a task's feature matrix.
    pub fn task_logits(&self, task: &ProbeTask, rows: &[usize]) -> Result<Vec<f64>> {
        self.check_columns(task.n_neurons())?;
        let x = task.features();
        Ok(rows
            .iter()
            .map(|&i| self.logit(|j| f64::from(x[[i, j]])))
            .collect())
    }
}

/// Labels (`+1` iff logit > threshold) and logits for every row.
pub fn predict(probe: &SparseProbe, rows: ArrayView2<'_, f32>) -> Result<(Vec<i8>, Vec<f64>)> {
    probe.check_columns(rows.ncols())?;
    let logits: Vec<f64> = rows
        .outer_iter()
        .map(|r| probe.logit(|j| f64::from(r[j])))
        .collect();
    let labels = logits
        .iter()
        .map(|&z| if z > probe.threshold { 1 } else { -1 })
        .collect();
    Ok((labels, logits))
}

/// `log(1 + exp(-t))` without overflow.
#[inline]
pub(crate) fn log1p_exp_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Weighted logistic objective over a dense standardized design.
///
/// `F(w, b) = Σᵢ cᵢ log(1 + exp(−yᵢ(w·zᵢ + b))) / Σᵢ cᵢ + l1‖w‖₁ + (l2/2)‖w‖²`
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    /// Row-major `n × k` design.
    z: Vec<f64>,
    n: usize,
    k: usize,
    y: Vec<f64>,
    /// Sample weights normalized to sum to one.
    c: Vec<f64>,
    l1: f64,
    l2: f64,
}

impl LogisticObjective {
    pub fn new(z: Vec<f64>, k: usize, y: Vec<f64>, weights: &[f64], l1: f64, l2: f64) -> Self {
        let n = y.len();
        assert_eq!(z.len(), n * k, "design shape");
        assert_eq!(weights.len(), n, "weights length");
        let total: f64 = weights.iter().sum();
        let c = weights.iter().map(|w| w / total).collect();
        LogisticObjective {
            z,
            n,
            k,
            y,
            c,
            l1,
            l2,
        }
    }

    /// Standardized design for `support` over the task's training rows.
    pub fn from_task(
        task: &ProbeTask,
        support: &[usize],
        l1: f64,
        l2: f64,
    ) -> (Self, Vec<Standardization>) {
        let train = task.train();
        let x = task.features();
        let k = support.len();
        let stds: Vec<Standardization> = support
            .iter()
            .map(|&j| Standardization::fit(&task.train_column(j)))
            .collect();
        let mut z = Vec::with_capacity(train.len() * k);
        for &i in train {
            for (&j, st) in support.iter().zip(&stds) {
                z.push(st.apply(f64::from(x[[i, j]])));
            }
        }
        let y = train
            .iter()
            .map(|&i| f64::from(task.labels()[i]))
            .collect();
        let w: Vec<f64> = train.iter().map(|&i| task.weight(i)).collect();
        (Self::new(z, k, y, &w, l1, l2), stds)
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        if self.k == 0 {
            return vec![b; self.n];
        }
        self.z
            .chunks_exact(self.k)
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    fn loss_from_eta(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.y)
            .zip(&self.c)
            .map(|((e, y), c)| c * log1p_exp_neg(y * e))
            .sum()
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        self.l1 * w.iter().map(|v| v.abs()).sum::<f64>()
            + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Full objective including the L1 term.
    pub fn value(&self, w: &[f64], b: f64) -> f64 {
        self.loss_from_eta(&self.margins(w, b)) + self.penalty(w)
    }

    /// Value of the differentiable part (weighted loss + ridge).
    pub fn smooth_value(&self, w: &[f64], b: f64) -> f64 {
        self.loss_from_eta(&self.margins(w, b))
            + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Gradient of the differentiable part: `(∂w, ∂b)`.
    pub fn smooth_gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let eta = self.margins(w, b);
        let (gw, gb, _) = self.gradient_parts(w, &eta);
        (gw, gb)
    }

    /// Returns `(∂w, ∂b, per-sample residual c·(p − y01))`.
    fn gradient_parts(&self, w: &[f64], eta: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        let r: Vec<f64> = eta
            .iter()
            .zip(&self.y)
            .zip(&self.c)
            .map(|((e, y), c)| c * (sigmoid(*e) - 0.5 * (y + 1.0)))
            .collect();
        let mut gw: Vec<f64> = w.iter().map(|v| self.l2 * v).collect();
        if self.k > 0 {
            for (row, ri) in self.z.chunks_exact(self.k).zip(&r) {
                for (g, zij) in gw.iter_mut().zip(row) {
                    *g += ri * zij;
                }
            }
        }
        let gb = r.iter().sum();
        (gw, gb, r)
    }

    /// Sup-norm of the minimal-norm subgradient of the full objective.
    pub fn optimality(&self, w: &[f64], gw: &[f64], gb: f64) -> f64 {
        gw.iter()
            .zip(w)
            .map(|(g, v)| {
                if *v != 0.0 {
                    (g + self.l1 * v.signum()).abs()
                } else {
                    (g.abs() - self.l1).max(0.0)
                }
            })
            .fold(gb.abs(), f64::max)
    }
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Outcome of a proximal Newton fit on a [`LogisticObjective`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Objective value at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

/// Minimizes the objective with proximal Newton steps, starting from the
/// intercept-only optimum.
pub fn fit(obj: &LogisticObjective, max_iterations: usize, tolerance: f64) -> FitOutcome {
    let (n, k) = (obj.n, obj.k);
    let wpos: f64 = obj
        .c
        .iter()
        .zip(&obj.y)
        .filter(|(_, y)| **y > 0.0)
        .map(|(c, _)| c)
        .sum();
    let mut w = vec![0.0; k];
    let mut b = if wpos > 0.0 && wpos < 1.0 {
        (wpos / (1.0 - wpos)).ln()
    } else {
        0.0
    };
    let mut eta = obj.margins(&w, b);
    let mut f = obj.loss_from_eta(&eta) + obj.penalty(&w);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut grad_norm;
    let mut converged = false;

    let mut q = vec![0.0; n];
    let mut hz2 = vec![0.0; k];
    loop {
        let (gw, gb, _) = obj.gradient_parts(&w, &eta);
        grad_norm = obj.optimality(&w, &gw, gb);
        if grad_norm <= tolerance {
            converged = true;
            break;
        }
        if iterations >= max_iterations {
            break;
        }
        iterations += 1;

        let h: Vec<f64> = eta
            .iter()
            .zip(&obj.c)
            .map(|(e, c)| {
                let p = sigmoid(*e);
                c * p * (1.0 - p)
            })
            .collect();
        let h_sum: f64 = h.iter().sum();
        hz2.iter_mut().for_each(|v| *v = obj.l2);
        for (row, hi) in obj.z.chunks_exact(k.max(1)).zip(&h) {
            if k == 0 {
                break;
            }
            for (acc, zij) in hz2.iter_mut().zip(row) {
                *acc += hi * zij * zij;
            }
        }

        // coordinate descent on the quadratic model; q = db + Z·dw
        q.iter_mut().for_each(|v| *v = 0.0);
        let mut dw = vec![0.0; k];
        let mut db = 0.0;
        let mut active: Vec<usize> = (0..k).collect();
        let mut full_pass = true;
        for _pass in 0..200 {
            let mut max_delta: f64 = 0.0;
            if h_sum > 0.0 {
                let hq: f64 = h.iter().zip(&q).map(|(a, b)| a * b).sum();
                let step = -(gb + hq) / h_sum;
                if step != 0.0 {
                    db += step;
                    q.iter_mut().for_each(|v| *v += step);
                    max_delta = max_delta.max(step.abs());
                }
            }
            let coords: &[usize] = &active;
            for &j in coords {
                let a = hz2[j];
                if a <= 0.0 {
                    continue;
                }
                let mut hzq = 0.0;
                for i in 0..n {
                    hzq += h[i] * obj.z[i * k + j] * q[i];
                }
                let g = gw[j] + hzq + obj.l2 * dw[j];
                let cur = w[j] + dw[j];
                let new = soft_threshold(cur - g / a, obj.l1 / a);
                let delta = new - cur;
                if delta != 0.0 {
                    dw[j] += delta;
                    for i in 0..n {
                        q[i] += delta * obj.z[i * k + j];
                    }
                    max_delta = max_delta.max(delta.abs() * a.sqrt());
                }
            }
            let settled = max_delta < 1e-12;
            if full_pass {
                active = (0..k).filter(|&j| w[j] + dw[j] != 0.0).collect();
                if settled {
                    break;
                }
                full_pass = false;
            } else if settled {
                full_pass = true;
                active = (0..k).collect();
            }
        }

        // backtracking on the true objective
        let l1_now: f64 = w.iter().map(|v| v.abs()).sum();
        let l1_next: f64 = w.iter().zip(&dw).map(|(a, d)| (a + d).abs()).sum();
        let descent = gw.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>()
            + gb * db
            + obj.l1 * (l1_next - l1_now);
        if !(descent < 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let w_try: Vec<f64> = w.iter().zip(&dw).map(|(a, d)| a + t * d).collect();
            let eta_try: Vec<f64> = eta.iter().zip(&q).map(|(e, d)| e + t * d).collect();
            let f_try = obj.loss_from_eta(&eta_try) + obj.penalty(&w_try);
            if f_try <= f + 1e-4 * t * descent {
                w = w_try;
                b += t * db;
                eta = eta_try;
                f = f_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
    }

    FitOutcome {
        weights: w,
        bias: b,
        converged,
        iterations,
        gradient_norm: grad_norm,
        objective_trace: trace,
    }
}

fn check_support(task: &ProbeTask, support: &[usize]) -> Result<Vec<usize>> {
    if support.is_empty() {
        return Err(ProbeError::InvalidArgument("support is empty".into()));
    }
    let d = task.n_neurons();
    let mut sorted = support.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != support.len() {
        return Err(ProbeError::InvalidArgument("support has duplicates".into()));
    }
    if let Some(&max) = sorted.last() {
        if max >= d {
            return Err(ProbeError::SupportOutOfRange { index: max, cols: d });
        }
    }
    let (pos, neg) = task.train_class_counts();
    if pos == 0 || neg == 0 {
        return Err(ProbeError::DegenerateClass("train split lacks a class".into()));
    }
    Ok(sorted)
}

/// Fits a logistic probe on `support` and returns it with the full fit
/// outcome. Zero-weight entries are dropped from the probe's support.
pub fn fit_logistic(
    task: &ProbeTask,
    support: &[usize],
    cfg: &TrainConfig,
) -> Result<(SparseProbe, FitOutcome)> {
    cfg.validate()?;
    let support = check_support(task, support)?;
    let (obj, stds) = LogisticObjective::from_task(task, &support, cfg.l1, cfg.l2);
    let outcome = fit(&obj, cfg.max_iterations, cfg.tolerance);
    let mut probe = SparseProbe {
        support: Vec::new(),
        weights: Vec::new(),
        bias: outcome.bias,
        threshold: 0.0,
        standardization: Vec::new(),
        converged: outcome.converged,
        k: 0,
        iterations: outcome.iterations,
        gradient_norm: outcome.gradient_norm,
    };
    for ((&j, &w), st) in support.iter().zip(&outcome.weights).zip(&stds) {
        if w != 0.0 {
            probe.support.push(j);
            probe.weights.push(w);
            probe.standardization.push(*st);
        }
    }
    probe.k = probe.support.len();
    Ok((probe, outcome))
}

/// Trains a class-weighted elastic-net logistic probe restricted to
/// `support`. Non-convergence is reported through `probe.converged`.
pub fn train_logistic(task: &ProbeTask, support: &[usize], cfg: &TrainConfig) -> Result<SparseProbe> {
    fit_logistic(task, support, cfg).map(|(p, _)| p)
}

/// Mean class-weighted log-loss of the probe on the test split.
pub fn logistic_test_loss(probe: &SparseProbe, task: &ProbeTask) -> Result<f64> {
    let rows = task.test();
    let logits = probe.task_logits(task, rows)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&i, z) in rows.iter().zip(&logits) {
        let c = task.weight(i);
        num += c * log1p_exp_neg(f64::from(task.labels()[i]) * z);
        den += c;
    }
    Ok(num / den)
}

/// One step of an adaptive-thresholding sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepStep {
    pub k: usize,
    /// Neurons the step trained on (sorted).
    pub support: Vec<usize>,
    pub probe: Option<SparseProbe>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub fn validate_schedule(schedule: &[usize], available: usize) -> Result<()> {
    let first = *schedule
        .first()
        .ok_or_else(|| ProbeError::InvalidSchedule("schedule is empty".into()))?;
    if first > available {
        return Err(ProbeError::InvalidSchedule(format!(
            "first step k = {first} exceeds the {available} candidate neurons"
        )));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ProbeError::InvalidSchedule(
            "schedule must be strictly decreasing".into(),
        ));
    }
    if *schedule.last().unwrap() == 0 {
        return Err(ProbeError::InvalidSchedule("k must stay ≥ 1".into()));
    }
    Ok(())
}

/// Default sweep: powers of two from 256 down to 1, plus 6, 5 and 3.
pub fn default_schedule() -> Vec<usize> {
    vec![256, 128, 64, 32, 16, 8, 6, 5, 4, 3, 2, 1]
}

/// Iteratively retrains on the `k_t` largest-magnitude coefficients of the
/// previous probe. `candidates` is the prefiltered neuron ranking; step 0
/// trains on its first `k₀` entries.
pub fn adaptive_threshold_sweep(
    task: &ProbeTask,
    candidates: &[usize],
    schedule: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SweepStep>> {
    validate_schedule(schedule, candidates.len())?;
    cfg.validate()?;
    let d = task.n_neurons();
    if let Some(&bad) = candidates.iter().find(|&&c| c >= d) {
        return Err(ProbeError::SupportOutOfRange { index: bad, cols: d });
    }
    // (neuron, |coefficient|) for the previous step's support, in preference order
    let mut ranked: Vec<(usize, f64)> = candidates.iter().map(|&j| (j, 0.0)).collect();
    let mut steps = Vec::with_capacity(schedule.len());
    for &k in schedule {
        let mut support: Vec<usize> = ranked.iter().take(k).map(|(j, _)| *j).collect();
        support.sort_unstable();
        let step = match train_logistic(task, &support, cfg) {
            Ok(probe) => {
                let report = evaluate(&probe, task)?;
                let mut next: Vec<(usize, f64)> = support
                    .iter()
                    .map(|&j| {
                        let mag = probe
                            .support
                            .iter()
                            .position(|&s| s == j)
                            .map_or(0.0, |p| probe.weights[p].abs());
                        (j, mag)
                    })
                    .collect();
                next.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked = next;
                SweepStep {
                    k,
                    support,
                    probe: Some(probe),
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => {
                ranked.truncate(k);
                SweepStep {
                    k,
                    support,
                    probe: None,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ClassWeights, ProbeTask, Weighting};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn separable_1d() -> ProbeTask {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| if i < 10 { 1.0 } else { 0.0 });
        let labels = (0..20).map(|i| if i < 10 { 1 } else { -1 }).collect();
        ProbeTask::from_labels(Arc::new(x), labels, 0.2, 0, Weighting::Balanced).unwrap()
    }

    #[test]
    fn separable_case_fits_perfectly() {
        let task = separable_1d();
        let cfg = TrainConfig {
            l1: 0.0,
            l2: 1e-3,
            ..Default::default()
        };
        let probe = train_logistic(&task, &[0], &cfg).unwrap();
        assert!(probe.converged);
        let rows = task.features().select(ndarray::Axis(0), task.train());
        let (pred, _) = predict(&probe, rows.view()).unwrap();
        let correct = pred
            .iter()
            .zip(task.train())
            .filter(|(p, &i)| **p == task.labels()[i])
            .count();
        assert_eq!(correct, task.train().len());
    }

    #[test]
    fn constant_column_gives_prior_intercept() {
        let x = Array2::from_elem((12, 1), 3.0f32);
        let labels: Vec<i8> = (0..12).map(|i| if i < 4 { 1 } else { -1 }).collect();
        let weights = ClassWeights {
            positive: 1.0,
            negative: 0.5,
        };
        let train: Vec<usize> = vec![0, 1, 2, 4, 5, 6, 7];
        let test = vec![3, 8, 9, 10, 11];
        let task = ProbeTask::from_parts(Arc::new(x), labels, weights, train, test).unwrap();
        let cfg = TrainConfig {
            l1: 0.0,
            l2: 1e-3,
            tolerance: 1e-10,
            ..Default::default()
        };
        let (probe, outcome) = fit_logistic(&task, &[0], &cfg).unwrap();
        assert_eq!(outcome.weights, vec![0.0]);
        assert!(probe.support.is_empty());
        // train: 3 positives at weight 1, 4 negatives at 0.5
        let expected = (3.0f64 / 2.0).ln();
        assert!((probe.bias - expected).abs() < 1e-8, "{}", probe.bias);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k) = (40, 4);
        let z: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { -1.0 }).collect();
        let c: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 1.3 } else { 0.7 }).collect();
        let obj = LogisticObjective::new(z, k, y, &c, 0.0, 0.05);
        for _ in 0..10 {
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
            let b = rng.random_range(-1.0..1.0);
            let (gw, gb) = obj.smooth_gradient(&w, b);
            let h = 1e-5;
            for j in 0..=k {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                let (mut bp, mut bm) = (b, b);
                if j < k {
                    wp[j] += h;
                    wm[j] -= h;
                } else {
                    bp += h;
                    bm -= h;
                }
                let fd = (obj.smooth_value(&wp, bp) - obj.smooth_value(&wm, bm)) / (2.0 * h);
                let an = if j < k { gw[j] } else { gb };
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn predict_constant_and_infinite_threshold() {
        let mut probe = SparseProbe::new(
            vec![0],
            vec![0.0],
            0.5,
            vec![Standardization {
                mean: 0.0,
                scale: 1.0,
            }],
        )
        .unwrap();
        let rows = array![[1.0f32], [-3.0], [0.0]];
        let (labels, _) = predict(&probe, rows.view()).unwrap();
        assert_eq!(labels, vec![1, 1, 1]);
        probe.threshold = f64::INFINITY;
        let (labels, _) = predict(&probe, rows.view()).unwrap();
        assert_eq!(labels, vec![-1, -1, -1]);
    }

    #[test]
    fn predict_rejects_narrow_rows() {
        let probe = SparseProbe::new(
            vec![3],
            vec![1.0],
            0.0,
            vec![Standardization {
                mean: 0.0,
                scale: 1.0,
            }],
        )
        .unwrap();
        let rows = array![[1.0f32, 2.0]];
        assert!(matches!(
            predict(&probe, rows.view()),
            Err(ProbeError::SupportOutOfRange { index: 3, cols: 2 })
        ));
    }

    #[test]
    fn logits_match_manual_dot_product() {
        let probe = SparseProbe::new(
            vec![0, 2],
            vec![0.7, -1.1],
            0.3,
            vec![
                Standardization {
                    mean: 1.0,
                    scale: 2.0,
                },
                Standardization {
                    mean: -0.5,
                    scale: 0.25,
                },
            ],
        )
        .unwrap();
        let rows = array![[1.0f32, 9.0, 0.5], [3.0, -2.0, -1.0]];
        let (_, logits) = predict(&probe, rows.view()).unwrap();
        for (r, z) in rows.outer_iter().zip(logits) {
            let manual = 0.7 * (f64::from(r[0]) - 1.0) / 2.0
                - 1.1 * (f64::from(r[2]) + 0.5) / 0.25
                + 0.3;
            assert!((manual - z).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_probe_loss_is_ln2() {
        let task = separable_1d();
        let probe = SparseProbe::new(vec![], vec![], 0.0, vec![]).unwrap();
        let loss = logistic_test_loss(&probe, &task).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&[8, 8], 10).is_err());
        assert!(validate_schedule(&[8, 4, 0], 10).is_err());
        assert!(validate_schedule(&[12, 4], 10).is_err());
        assert!(validate_schedule(&[], 10).is_err());
        assert!(validate_schedule(&[10, 3, 1], 10).is_ok());
    }
}
