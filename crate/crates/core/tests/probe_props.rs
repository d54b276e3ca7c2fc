mod common;

use ndarray::Axis;
use neuroprobe::probe::{
    adaptive_threshold_sweep, fit_logistic, logistic_test_loss, predict, LogisticObjective,
};
use neuroprobe::store::{ClassWeights, ProbeTask};
use neuroprobe::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with_weights(task: &ProbeTask, w: ClassWeights) -> ProbeTask {
    ProbeTask::from_parts(
        task.shared_features(),
        task.labels().to_vec(),
        w,
        task.train().to_vec(),
        task.test().to_vec(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_never_increases(seed in any::<u64>(), l1 in 0.0f64..0.05, l2 in 0.0f64..0.05) {
        let task = common::random_task(seed, 60, 5);
        let support: Vec<usize> = (0..5).collect();
        let cfg = TrainConfig { l1, l2, ..Default::default() };
        let (_, outcome) = fit_logistic(&task, &support, &cfg).unwrap();
        for w in outcome.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn doubling_class_weights_keeps_the_minimizer(seed in any::<u64>()) {
        let base = common::random_task(seed, 60, 4);
        let cw = base.class_weights();
        let doubled = with_weights(&base, ClassWeights { positive: 2.0 * cw.positive, negative: 2.0 * cw.negative });
        let support: Vec<usize> = (0..4).collect();
        let cfg = TrainConfig { l1: 0.0, l2: 1e-2, ..Default::default() };
        let (a, _) = fit_logistic(&base, &support, &cfg).unwrap();
        let (b, _) = fit_logistic(&doubled, &support, &cfg).unwrap();
        prop_assert_eq!(&a.support, &b.support);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn ridge_solution_ignores_the_seed(seed in any::<u64>(), other in any::<u64>()) {
        let task = common::random_task(seed, 50, 4);
        let support: Vec<usize> = (0..4).collect();
        let mk = |s| TrainConfig { l1: 0.0, l2: 1e-2, seed: s, ..Default::default() };
        let (a, _) = fit_logistic(&task, &support, &mk(seed)).unwrap();
        let (b, _) = fit_logistic(&task, &support, &mk(other)).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        prop_assert!((a.bias - b.bias).abs() < 1e-5);
    }

    #[test]
    fn train_accuracy_beats_the_prior(seed in any::<u64>()) {
        let task = common::random_task(seed, 80, 3);
        let (probe, _) = fit_logistic(&task, &[0, 1, 2], &TrainConfig::default()).unwrap();
        let rows = task.features().select(Axis(0), task.train());
        let (pred, _) = predict(&probe, rows.view()).unwrap();
        let (mut hit, mut total) = (0.0, 0.0);
        let (mut pos_mass, mut neg_mass) = (0.0, 0.0);
        for (&i, p) in task.train().iter().zip(&pred) {
            let w = task.weight(i);
            total += w;
            if *p == task.labels()[i] {
                hit += w;
            }
            if task.labels()[i] > 0 { pos_mass += w } else { neg_mass += w }
        }
        let prior = f64::max(pos_mass, neg_mass) / total;
        prop_assert!(hit / total >= prior - 1e-12);
    }

    #[test]
    fn test_loss_matches_per_sample_sum(seed in any::<u64>()) {
        let task = common::random_task(seed, 60, 3);
        let (probe, _) = fit_logistic(&task, &[0, 1, 2], &TrainConfig::default()).unwrap();
        let logits = probe.task_logits(&task, task.test()).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (&i, z) in task.test().iter().zip(&logits) {
            let m = f64::from(task.labels()[i]) * z;
            num += task.weight(i) * (1.0 + (-m).exp()).ln();
            den += task.weight(i);
        }
        let got = logistic_test_loss(&probe, &task).unwrap();
        prop_assert!((got - num / den).abs() < 1e-8);
    }

    #[test]
    fn adaptive_supports_are_nested(seed in any::<u64>()) {
        let task = common::random_task(seed, 80, 12);
        let candidates: Vec<usize> = (0..12).rev().collect();
        let steps = adaptive_threshold_sweep(&task, &candidates, &[12, 8, 5, 3, 1], &TrainConfig::default()).unwrap();
        for pair in steps.windows(2) {
            prop_assert!(pair[1].support.iter().all(|j| pair[0].support.contains(j)));
            prop_assert_eq!(pair[1].support.len(), pair[1].k);
        }
        prop_assert_eq!(steps.last().unwrap().k, 1);
    }
}

#[test]
fn gradient_matches_central_differences_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, k) = (30, 4);
    let z: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
    let c: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 1.5 } else { 0.75 }).collect();
    let obj = LogisticObjective::new(z, k, y, &c, 0.0, 0.3);
    let h = 1e-5;
    for _ in 0..10 {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b = rng.random_range(-1.0..1.0);
        let (gw, gb) = obj.smooth_gradient(&w, b);
        for j in 0..k {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (obj.smooth_value(&up, b) - obj.smooth_value(&dn, b)) / (2.0 * h);
            assert!((fd - gw[j]).abs() <= 1e-4 * gw[j].abs().max(1.0));
        }
        let fd = (obj.smooth_value(&w, b + h) - obj.smooth_value(&w, b - h)) / (2.0 * h);
        assert!((fd - gb).abs() <= 1e-4 * gb.abs().max(1.0));
    }
}
