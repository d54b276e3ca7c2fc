//! Recovery checks against generated datasets with a known answer.

use neuroprobe::eval::{
    activation_cooccurrence, basis_alignment_study, summed_activation_separation,
    weight_fingerprint, BasisStudyOptions,
};
use neuroprobe::lab::{
    build_circle_embedding, construction_weight_stats, generate_planted, FeatureKind,
    PlantedDataset, PlantedDatasetSpec,
};
use neuroprobe::probe::adaptive_threshold_sweep;
use neuroprobe::scoring::{
    prefilter_top_m, score_f_statistic, score_l1_logistic, score_mean_difference,
    score_mutual_information,
};
use neuroprobe::store::{make_task, ProbeTask, Weighting};
use neuroprobe::{evaluate, train_logistic, TrainConfig};

fn planted(kind: FeatureKind, n: usize, d: usize, sigma: f64, seed: u64) -> PlantedDataset {
    generate_planted(&PlantedDatasetSpec::new(n, d, kind, sigma, seed)).unwrap()
}

fn task_of(p: &PlantedDataset) -> ProbeTask {
    make_task(&p.dataset, &p.manifest, 0.2, 7, Weighting::Balanced).unwrap()
}

fn f1_on(task: &ProbeTask, support: &[usize]) -> f64 {
    let probe = train_logistic(task, support, &TrainConfig::default()).unwrap();
    evaluate(&probe, task).unwrap().f1
}

#[test]
fn every_scorer_ranks_the_planted_neuron_first() {
    for seed in 0..4 {
        let p = planted(FeatureKind::Monosemantic, 600, 64, 0.5, seed);
        let truth = p.ground_truth.planted_indices[0];
        let task = task_of(&p);
        let rankings = [
            score_mean_difference(&task),
            score_f_statistic(&task).unwrap(),
            score_mutual_information(&task, 3).unwrap(),
            score_l1_logistic(&task, 1e-2, &TrainConfig::default()).unwrap(),
        ];
        for r in &rankings {
            assert_eq!(r.top(1), &[truth], "seed {seed}");
        }
        assert!(f1_on(&task, &[truth]) >= 0.99);
    }
}

#[test]
fn planted_neuron_survives_the_prefilter() {
    let p = planted(FeatureKind::Monosemantic, 500, 200, 1.0, 11);
    let task = task_of(&p);
    let pool = prefilter_top_m(&score_mean_difference(&task), 50).unwrap();
    assert_eq!(pool.len(), 50);
    assert!(pool.contains(&p.ground_truth.planted_indices[0]));
}

#[test]
fn adaptive_sweep_converges_to_the_planted_neuron() {
    let p = planted(FeatureKind::Monosemantic, 600, 128, 0.5, 5);
    let task = task_of(&p);
    let pool = prefilter_top_m(&score_mean_difference(&task), 64).unwrap();
    let steps = adaptive_threshold_sweep(&task, &pool, &[64, 16, 4, 1], &TrainConfig::default()).unwrap();
    let last = steps.last().unwrap();
    assert_eq!(last.support, p.ground_truth.planted_indices);
    assert!(last.report.as_ref().unwrap().f1 >= 0.99);
}

#[test]
fn superposed_sum_separates_only_in_aggregate() {
    let mut hits = 0;
    for seed in 0..10 {
        let p = planted(FeatureKind::SuperposedSum { m: 3 }, 800, 32, 0.5, seed);
        let support = &p.ground_truth.planted_indices;
        let sum = summed_activation_separation(&p.dataset, &p.manifest, support).unwrap();
        let singles_fail = support.iter().all(|&j| {
            summed_activation_separation(&p.dataset, &p.manifest, &[j]).unwrap().margin < 0.0
        });
        if sum.margin > 0.0 && singles_fail {
            hits += 1;
        }
    }
    assert_eq!(hits, 10);
}

#[test]
fn union_neurons_split_the_positives() {
    let p = planted(FeatureKind::Union { m: 3 }, 900, 24, 0.3, 2);
    let c = activation_cooccurrence(&p.dataset, &p.manifest, &p.ground_truth.planted_indices, 0.5).unwrap();
    let diag: f64 = (0..3).map(|i| c[i][i]).sum();
    assert!((diag - 1.0).abs() < 1e-12, "diagonal sums to {diag}");
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                assert_eq!(c[a][b], 0.0);
            }
        }
    }
}

#[test]
fn conjunction_needs_every_neuron() {
    let p = planted(FeatureKind::Compositional { m: 3 }, 2000, 32, 0.3, 4);
    let task = task_of(&p);
    let truth = p.ground_truth.planted_indices.clone();
    assert!(f1_on(&task, &truth) >= 0.99);
    for &j in &truth {
        assert!(f1_on(&task, &[j]) <= 0.9);
    }
    let best_single = (0..32).map(|j| f1_on(&task, &[j])).fold(0.0, f64::max);
    assert!(best_single <= 0.9, "best 1-sparse F1 {best_single}");
}

#[test]
fn aligned_features_prefer_the_neuron_basis() {
    let p = planted(FeatureKind::Monosemantic, 800, 48, 0.5, 9);
    let rep = basis_alignment_study(&p.dataset, &p.manifest, 3, &[1, 2, 3, 4, 5], &BasisStudyOptions::default()).unwrap();
    assert!(rep.neuron_curve[0] > rep.random_mean[0] + 0.1);
    assert_eq!(rep.random_curves.len(), 5);
}

#[test]
fn single_seed_mean_is_that_seed() {
    let p = planted(FeatureKind::Monosemantic, 300, 16, 0.5, 1);
    let rep = basis_alignment_study(&p.dataset, &p.manifest, 4, &[42], &BasisStudyOptions::default()).unwrap();
    assert_eq!(rep.random_mean, rep.random_curves[0]);
}

#[test]
fn fingerprint_of_the_circle_construction() {
    let emb = build_circle_embedding(8).unwrap();
    let stats = construction_weight_stats(&emb, 3);
    let fp = weight_fingerprint(&stats, -1.0).unwrap();
    assert_eq!(fp.len(), 1);
    let expected = emb.bias * emb.alpha;
    for q in &fp[0].quantiles {
        assert!((q - expected).abs() < 1e-12);
    }
    assert_eq!(fp[0].fraction_below_cutoff, 1.0);
    assert_eq!(fp[0].neurons, 8);
}
