//! Brute-force reference computations for tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` and deliberately avoids the
//! factorizations and samplers of the main crate: matrices are inverted by
//! Gauss-Jordan elimination, Pólya-Gamma variates come from the truncated
//! infinite-sum-of-gammas representation, and expectations are Monte Carlo.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Dense {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn diag(v: &[f64]) -> Dense {
    let mut m = zeros(v.len(), v.len());
    for (i, &x) in v.iter().enumerate() {
        m[i][i] = x;
    }
    m
}

pub fn transpose(a: &Dense) -> Dense {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|ar| {
            assert_eq!(ar.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| ar[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn matvec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn sub(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect()
}

pub fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle inverse");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// log |det A| via Gaussian elimination with partial pivoting.
pub fn log_abs_det(a: &Dense) -> f64 {
    let n = a.len();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / p;
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    acc
}

/// Textbook lower Cholesky factor (no jitter, no blocking).
pub fn cholesky(a: &Dense) -> Dense {
    let n = a.len();
    let mut l = zeros(n, n);
    for j in 0..n {
        let mut s = a[j][j];
        for k in 0..j {
            s -= l[j][k] * l[j][k];
        }
        assert!(s > 0.0, "oracle cholesky: matrix not PD");
        l[j][j] = s.sqrt();
        for i in j + 1..n {
            let mut t = a[i][j];
            for k in 0..j {
                t -= l[i][k] * l[j][k];
            }
            l[i][j] = t / l[j][j];
        }
    }
    l
}

/// Multivariate normal log density via dense inverse and determinant.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &Dense) -> f64 {
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let q = dotv(&d, &matvec(&inverse(cov), &d));
    -0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_abs_det(cov) + q)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// PG(1, c) via `(1/(2π²)) Σ_{k=1}^{K} g_k / ((k − 1/2)² + c²/(4π²))`, `g_k ~ Gamma(1, 1)`.
/// With `tail_correction` the expected value of the omitted terms is added.
pub fn pg_sum_of_gammas<R: Rng + ?Sized>(c: f64, terms: usize, tail_correction: bool, rng: &mut R) -> f64 {
    let shift = c * c / (4.0 * PI * PI);
    let mut s = 0.0;
    for k in 1..=terms {
        let h = k as f64 - 0.5;
        let g: f64 = Exp1.sample(rng);
        s += g / (h * h + shift);
    }
    if tail_correction {
        // Σ_{k>K} 1/((k−½)² + shift) ≈ ∫_{K}^{∞} dx/(x² + shift)
        let tail = if shift > 0.0 {
            (PI / 2.0 - (terms as f64 / shift.sqrt()).atan()) / shift.sqrt()
        } else {
            1.0 / terms as f64
        };
        s += tail;
    }
    s / (2.0 * PI * PI)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = sign * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Monte-Carlo `E[σ(f)]`, `f ~ N(mu, var)`; returns (estimate, standard error).
pub fn mc_expected_sigmoid<R: Rng + ?Sized>(mu: f64, var: f64, n: usize, rng: &mut R) -> (f64, f64) {
    let sd = var.sqrt();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        let v = sigmoid(mu + sd * z);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var_hat = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var_hat / n as f64).sqrt())
}

/// Exhaustive minimum within-cluster sum of squares over all 2-partitions.
/// Returns the membership mask of the side containing point 0.
pub fn best_two_partition(points: &[Vec<f64>]) -> Vec<bool> {
    let n = points.len();
    assert!((2..=20).contains(&n));
    let mut best = (f64::INFINITY, Vec::new());
    // point 0 always on side A; side B must be nonempty
    for mask in 0u32..(1 << (n - 1)) - 1 {
        let in_a: Vec<bool> = (0..n).map(|i| i == 0 || (mask >> (i - 1)) & 1 == 1).collect();
        let cost = side_cost(points, &in_a, true) + side_cost(points, &in_a, false);
        if cost < best.0 {
            best = (cost, in_a);
        }
    }
    best.1
}

fn side_cost(points: &[Vec<f64>], in_a: &[bool], side: bool) -> f64 {
    let members: Vec<&Vec<f64>> = points.iter().zip(in_a).filter(|(_, &a)| a == side).map(|(p, _)| p).collect();
    let d = points[0].len();
    let centroid: Vec<f64> =
        (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
    members.iter().map(|p| p.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
}

/// Draws from N(mean, cov) using the oracle Cholesky factor.
pub struct GaussianSampler {
    mean: Vec<f64>,
    chol: Dense,
}

impl GaussianSampler {
    pub fn new(mean: Vec<f64>, cov: &Dense) -> Self {
        Self { mean, chol: cholesky(cov) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| StandardNormal.sample(rng)).collect();
        let lz = matvec(&self.chol, &z);
        self.mean.iter().zip(lz).map(|(m, v)| m + v).collect()
    }
}

/// log p(y) for a zero-mean binary GP classifier with Gram `k`, estimated by
/// sampling the prior: `log (1/S) Σ_s Π_i σ(±f_i^{(s)})`.
pub fn binary_gp_log_marginal<R: Rng + ?Sized>(k: &Dense, y: &[bool], samples: usize, rng: &mut R) -> f64 {
    let n = k.len();
    let mut kj = k.clone();
    for (i, row) in kj.iter_mut().enumerate() {
        row[i] += 1e-10;
    }
    let sampler = GaussianSampler::new(vec![0.0; n], &kj);
    let mut logs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let f = sampler.sample(rng);
        let l: f64 = f
            .iter()
            .zip(y)
            .map(|(&fi, &yi)| {
                let s = if yi { fi } else { -fi };
                -(1.0 + (-s).exp()).ln()
            })
            .sum();
        logs.push(l);
    }
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + (logs.iter().map(|l| (l - mx).exp()).sum::<f64>() / samples as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn inverse_of_known_matrix() {
        let a = vec![vec![4.0, 7.0], vec![2.0, 6.0]];
        let inv = inverse(&a);
        let expected = [[0.6, -0.7], [-0.2, 0.4]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((inv[i][j] - expected[i][j]).abs() < 1e-14);
            }
        }
        assert!((log_abs_det(&a) - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sum_of_gammas_mean() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let n = 20_000;
        let m = (0..n).map(|_| pg_sum_of_gammas(0.0, 200, true, &mut rng)).sum::<f64>() / n as f64;
        assert!((m - 0.25).abs() < 0.005);
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: Vec<f64> = b.iter().map(|x: &f64| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }

    #[test]
    fn two_partition_on_line() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.2]];
        assert_eq!(best_two_partition(&pts), vec![true, true, false, false]);
    }
}
