//! Mutual information between one continuous variable and a binary label,
//! estimated from nearest neighbours (Ross's continuous-discrete estimator).
//!
//! For each sample `i` with class size `N_c`, let `r_i` be the distance to its
//! `k`-th nearest same-class neighbour and `m_i` the number of samples of any
//! class (other than `i`) within `r_i`, the `k`-th neighbour included. Then
//!
//! `I ≈ ψ(N) + ψ(k) − ⟨ψ(N_c)⟩ − ⟨ψ(m_i)⟩`.
//!
//! Exact ties make every distance zero and break the estimator, and
//! post-nonlinearity activations tie often (many exact zeros). Values get a
//! fixed-seed jitter of relative size 1e-10 first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::digamma;

use crate::error::{ProbeError, Result};

pub const DEFAULT_MI_NEIGHBORS: usize = 3;

const JITTER_SEED: u64 = 0x6d69_6a69;
const JITTER_SCALE: f64 = 1e-10;

fn jittered(values: &[f64]) -> Vec<f64> {
    let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    let scale = JITTER_SCALE * mean_abs.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    values
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + scale * z
        })
        .collect()
}

/// Distance from the value at `pos` to its `k`-th nearest neighbour within a
/// sorted slice. Ties between the two sides take the lower side first.
fn kth_neighbor_distance(sorted: &[f64], pos: usize, k: usize) -> f64 {
    let x = sorted[pos];
    let (mut lo, mut hi) = (pos, pos + 1);
    let mut dist = 0.0;
    for _ in 0..k {
        let left = if lo > 0 { Some(x - sorted[lo - 1]) } else { None };
        let right = sorted.get(hi).map(|v| v - x);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => {
                dist = l;
                lo -= 1;
            }
            (Some(l), None) => {
                dist = l;
                lo -= 1;
            }
            (_, Some(r)) => {
                dist = r;
                hi += 1;
            }
            (None, None) => unreachable!("k is below the class size"),
        }
    }
    dist
}

/// Estimated mutual information in nats, clamped below at zero.
pub fn mutual_information_column(values: &[f64], labels: &[i8], k: usize) -> Result<f64> {
    let n = values.len();
    assert_eq!(labels.len(), n, "values and labels differ in length");
    let constant = values.windows(2).all(|w| w[0] == w[1]);
    let values = jittered(values);
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&v, &l) in values.iter().zip(labels) {
        if l > 0 {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    let min_class = pos.len().min(neg.len());
    if k == 0 || k >= min_class {
        return Err(ProbeError::NeighborCountTooLarge { k, min_class });
    }
    if constant {
        return Ok(0.0);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut all = values.to_vec();
    all.sort_by(f64::total_cmp);

    let mut psi_m = 0.0;
    let mut psi_class = 0.0;
    for class in [&pos, &neg] {
        let psi_nc = digamma(class.len() as f64);
        for p in 0..class.len() {
            let x = class[p];
            let r = kth_neighbor_distance(class, p, k);
            // all samples with |v − x| ≤ r, minus the sample itself
            let start = all.partition_point(|&v| x - v > r);
            let end = all.partition_point(|&v| v - x <= r);
            let m = (end - start - 1).max(k);
            psi_m += digamma(m as f64);
            psi_class += psi_nc;
        }
    }
    let n_f = n as f64;
    let mi = digamma(n_f) + digamma(k as f64) - psi_class / n_f - psi_m / n_f;
    Ok(mi.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kth_neighbor_on_line() {
        let v = [0.0, 1.0, 3.0, 6.0, 10.0];
        assert_eq!(kth_neighbor_distance(&v, 0, 1), 1.0);
        assert_eq!(kth_neighbor_distance(&v, 2, 1), 2.0);
        assert_eq!(kth_neighbor_distance(&v, 2, 2), 3.0);
        assert_eq!(kth_neighbor_distance(&v, 4, 2), 7.0);
    }

    #[test]
    fn constant_column_has_zero_information() {
        let values = vec![1.0; 40];
        let labels: Vec<i8> = (0..40).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        assert_eq!(mutual_information_column(&values, &labels, 3).unwrap(), 0.0);
    }

    #[test]
    fn tied_zeros_do_not_hide_a_perfect_feature() {
        use rand::Rng;
        // negatives all exactly 0, positives uniform on [1, 2]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..400)
            .map(|i| if i < 200 { rng.random_range(1.0..2.0) } else { 0.0 })
            .collect();
        let labels: Vec<i8> = (0..400).map(|i| if i < 200 { 1 } else { -1 }).collect();
        let mi = mutual_information_column(&values, &labels, 3).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 0.05, "{mi}");
    }

    #[test]
    fn separated_classes_approach_ln2() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..400)
            .map(|i| rng.random::<f64>() + if i < 200 { 0.0 } else { 10.0 })
            .collect();
        let labels: Vec<i8> = (0..400).map(|i| if i < 200 { 1 } else { -1 }).collect();
        let mi = mutual_information_column(&values, &labels, 3).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 0.05, "{mi}");
    }
}
