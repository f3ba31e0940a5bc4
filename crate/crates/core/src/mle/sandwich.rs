//! Cluster-robust covariance assembly.
//!
//! The covariance of the maximum-likelihood estimate is the sandwich
//! `B M B` with bread `B = (-H)^{-1}` and meat `M = sum_g s_g s_g'`,
//! where `s_g` sums score rows within cluster `g`. No small-sample
//! factor is applied. Clusters accumulate in first-appearance order so
//! the result is byte-identical across runs and thread counts.

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// Within-cluster score sums, one row per cluster, in the order cluster
/// ids first appear.
pub fn cluster_score_sums(scores: &DMatrix<f64>, cluster: &[u64]) -> DMatrix<f64> {
    assert_eq!(scores.nrows(), cluster.len(), "one cluster id per score row");
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut order: Vec<u64> = Vec::new();
    for &id in cluster {
        slot.entry(id).or_insert_with(|| {
            order.push(id);
            order.len() - 1
        });
    }
    let mut sums = DMatrix::zeros(order.len(), scores.ncols());
    for (row, &id) in cluster.iter().enumerate() {
        let g = slot[&id];
        for j in 0..scores.ncols() {
            sums[(g, j)] += scores[(row, j)];
        }
    }
    sums
}

/// `bread * (sum_g s_g s_g') * bread`.
pub fn sandwich_vcov(
    bread: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    cluster: &[u64],
) -> (DMatrix<f64>, usize) {
    let sums = cluster_score_sums(scores, cluster);
    let p = bread.nrows();
    let mut meat = DMatrix::zeros(p, p);
    for g in 0..sums.nrows() {
        let s: DVector<f64> = sums.row(g).transpose();
        meat += &s * s.transpose();
    }
    (bread * meat * bread, sums.nrows())
}
