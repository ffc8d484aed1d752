#![allow(dead_code)]

use gptree::{Dataset, KernelSpec, Matrix};
use gptree_oracles::Dense;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn to_dense(m: &Matrix<f64>) -> Dense {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// Gram matrix by direct formula, independent of the library's kernel code.
pub fn oracle_gram(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Dense {
    assert!(!spec.normalize_inputs);
    a.iter()
        .map(|x| {
            b.iter()
                .map(|z| {
                    let d2: f64 = x.iter().zip(z).map(|(p, q)| (p - q).powi(2)).sum();
                    spec.outputscale * (-d2 / (2.0 * spec.lengthscale * spec.lengthscale)).exp()
                })
                .collect()
        })
        .collect()
}

pub fn random_points<R: Rng>(n: usize, d: usize, spread: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect()).collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

pub fn raw_rbf(lengthscale: f64, outputscale: f64) -> KernelSpec {
    KernelSpec::rbf(lengthscale, outputscale).with_normalization(false)
}

/// Isotropic Gaussian blobs around `centers`, `per_class` rows each.
pub fn blobs<R: Rng>(centers: &[Vec<f64>], per_class: usize, sd: f64, rng: &mut R) -> Dataset<f64> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..per_class {
            rows.push(mu.iter().map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            }).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    Dataset::new(matrix(&rows), labels, centers.len()).unwrap()
}

/// `k` centers evenly spaced on a circle of radius `r`.
pub fn ring(k: usize, r: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / k as f64;
            vec![r * t.cos(), r * t.sin()]
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
