mod common;

use std::sync::Arc;

use ndarray::Array2;
use neuroprobe::scoring::{
    score_f_statistic, score_l1_logistic, score_mean_difference, score_mutual_information,
    score_random, SelectionResult,
};
use neuroprobe::store::{ProbeTask, Weighting};
use neuroprobe::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_ranking(result: &SelectionResult) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..result.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        result
            .rank_score(b)
            .partial_cmp(&result.rank_score(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx
}

/// Two-pass class means straight from the raw matrix.
fn brute_mean_difference(task: &ProbeTask) -> Vec<f64> {
    let x = task.features();
    (0..task.n_neurons())
        .map(|j| {
            let (mut sp, mut np, mut sn, mut nn) = (0.0, 0.0, 0.0, 0.0);
            for &i in task.train() {
                if task.labels()[i] > 0 {
                    sp += f64::from(x[[i, j]]);
                    np += 1.0;
                } else {
                    sn += f64::from(x[[i, j]]);
                    nn += 1.0;
                }
            }
            sp / np - sn / nn
        })
        .collect()
}

fn task_from(x: Array2<f32>, labels: Vec<i8>, seed: u64) -> ProbeTask {
    ProbeTask::from_labels(Arc::new(x), labels, 0.25, seed, Weighting::Balanced).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_difference_matches_two_pass(seed in any::<u64>(), n in 8usize..200, d in 1usize..10) {
        let task = common::random_task(seed, n, d);
        let got = score_mean_difference(&task);
        for (a, b) in got.scores.iter().zip(brute_mean_difference(&task)) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
        }
        prop_assert_eq!(&got.ranking, &reference_ranking(&got));
    }

    #[test]
    fn f_statistic_shift_and_scale_invariant(seed in any::<u64>(), shift in -64i32..64, pow in -3i32..4) {
        // eighths shifted by integers and scaled by powers of two stay exact in f32
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let base = Array2::from_shape_fn((n, 3), |_| rng.random_range(-40i32..40) as f32 / 8.0);
        let c = 2f32.powi(pow);
        let moved = base.mapv(|v| (v + shift as f32) * c);
        let a = score_f_statistic(&task_from(base, labels.clone(), seed)).unwrap();
        let b = score_f_statistic(&task_from(moved, labels, seed)).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn rankings_are_the_reference_sort(seed in any::<u64>()) {
        let task = common::random_task(seed, 40, 6);
        let results = [
            score_mean_difference(&task),
            score_f_statistic(&task).unwrap(),
            score_mutual_information(&task, 3).unwrap(),
            score_random(&task, seed),
        ];
        for r in &results {
            prop_assert_eq!(&r.ranking, &reference_ranking(r));
            let mut sorted = r.ranking.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
    }
}

#[test]
fn mean_difference_matches_two_pass_at_ten_thousand_rows() {
    let task = common::random_task(11, 10_000, 8);
    let got = score_mean_difference(&task);
    for (a, b) in got.scores.iter().zip(brute_mean_difference(&task)) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
    }
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn mutual_information_survives_a_monotone_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 500;
    let d = 20;
    let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let signal = 0.15 * j as f32 * f32::from(labels[i]);
        rng.random_range(-1.0f32..1.0) + signal
    });
    let cubed = x.mapv(|v| v * v * v);
    let a = score_mutual_information(&task_from(x, labels.clone(), 0), 3).unwrap();
    let b = score_mutual_information(&task_from(cubed, labels, 0), 3).unwrap();
    let rho = spearman(&a.scores, &b.scores);
    assert!(rho >= 0.95, "rank correlation {rho}");
}

#[test]
fn l1_scores_are_coefficient_magnitudes() {
    let task = common::random_task(3, 120, 5);
    let r = score_l1_logistic(&task, 0.01, &TrainConfig::default()).unwrap();
    assert!(r.scores.iter().all(|&s| s >= 0.0));
    assert_eq!(r.ranking[0], 0);
    assert_eq!(r.ranking, reference_ranking(&r));
}
