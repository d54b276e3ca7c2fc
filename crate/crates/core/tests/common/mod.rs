#![allow(dead_code)]

use std::sync::Arc;

use ndarray::Array2;
use neuroprobe::store::{ClassWeights, ProbeTask, Weighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian features with labels that lean on the first column.
pub fn random_task(seed: u64, n: usize, d: usize) -> ProbeTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let shift = if j == 0 { 0.8 * f32::from(labels[i]) } else { 0.0 };
        rng.random_range(-1.0f32..1.0) + shift
    });
    ProbeTask::from_labels(Arc::new(x), labels, 0.25, seed, Weighting::Balanced).unwrap()
}

/// A task whose train split is every row except the last two of each class,
/// with unequal class weights.
pub fn raw_task(x: Array2<f32>, labels: Vec<i8>, weights: ClassWeights) -> ProbeTask {
    let n = labels.len();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] > 0).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| labels[i] < 0).collect();
    let mut test = vec![pos[pos.len() - 1], neg[neg.len() - 1]];
    test.sort_unstable();
    let train = (0..n).filter(|i| !test.contains(i)).collect();
    ProbeTask::from_parts(Arc::new(x), labels, weights, train, test).unwrap()
}

pub fn subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..d {
            cur.push(j);
            rec(j + 1, d, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, k, &mut Vec::new(), &mut out);
    out
}

pub fn indicator(d: usize, set: &[usize]) -> Vec<bool> {
    let mut s = vec![false; d];
    for &j in set {
        s[j] = true;
    }
    s
}
