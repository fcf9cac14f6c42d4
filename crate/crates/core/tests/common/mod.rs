//! Shared fixtures: a brute-force LOF oracle and the seeded synthetic suite.

#![allow(dead_code)]

use dcfo::{sample_gaussian, Dataset, LofModel};

/// Textbook O(n^2) LOF with full sorting per point. Ties in the neighbour
/// order are broken by index.
pub fn brute_force_lof(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut knn = Vec::with_capacity(n);
    let mut kdist = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d(&points[i], &points[j]), j)).collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        kdist.push(others[k - 1].0);
        knn.push(others[..k].iter().map(|&(_, j)| j).collect::<Vec<_>>());
    }
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = knn[i].iter().map(|&o| kdist[o].max(d(&points[i], &points[o]))).sum();
            k as f64 / s.max(1e-12 * k as f64)
        })
        .collect();
    (0..n)
        .map(|i| knn[i].iter().map(|&o| lrd[o]).sum::<f64>() / (k as f64 * lrd[i]))
        .collect()
}

pub struct SuiteCase {
    pub seed: u64,
    pub dim: usize,
    pub k: usize,
    pub data: Dataset,
}

/// Ten 500-point standard Gaussians alternating between 2 and 5 dimensions,
/// with k cycling through 10, 15, 20.
pub fn gaussian_suite() -> Vec<SuiteCase> {
    (0..10)
        .map(|s| {
            let dim = if s % 2 == 0 { 2 } else { 5 };
            let k = [10, 15, 20][s % 3];
            let seed = 1000 + s as u64;
            SuiteCase {
                seed,
                dim,
                k,
                data: sample_gaussian(500, dim, seed).unwrap(),
            }
        })
        .collect()
}

pub fn model(case: &SuiteCase) -> LofModel {
    LofModel::build(case.data.clone(), case.k, Default::default()).unwrap()
}

pub fn report(criterion: usize, pass: bool, detail: impl std::fmt::Display) {
    println!(
        "criterion {criterion:>2}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}
