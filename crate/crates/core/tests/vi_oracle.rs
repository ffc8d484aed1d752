mod common;

use common::*;
use gptree::node_vi::InducingStore;
use gptree::{BatchAugState, KernelSpec, Matrix, NodeVIModel, PredictMode};
use gptree_oracles as oracle;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_spd<R: Rng>(m: usize, rng: &mut R) -> oracle::Dense {
    let l: oracle::Dense = (0..m).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut s = oracle::matmul(&l, &oracle::transpose(&l));
    for (i, row) in s.iter_mut().enumerate() {
        row[i] += 0.1;
    }
    s
}

fn dense_to_matrix(d: &oracle::Dense) -> Matrix<f64> {
    matrix(d)
}

/// A node at an arbitrary variational state `(μ̃, Σ̃)`.
fn node_at(spec: KernelSpec, z: &[Vec<f64>], mu: Vec<f64>, sigma: &oracle::Dense) -> NodeVIModel<f64> {
    let prec = oracle::inverse(sigma);
    let eta = oracle::matvec(&prec, &mu);
    let h: oracle::Dense = prec.iter().map(|r| r.iter().map(|v| -0.5 * v).collect()).collect();
    NodeVIModel::from_parts(
        spec,
        PredictMode::Quadrature,
        20,
        (0..z.len()).collect(),
        matrix(z),
        eta,
        dense_to_matrix(&h),
        mu,
        dense_to_matrix(sigma),
    )
    .unwrap()
}

fn store(z: &[Vec<f64>]) -> InducingStore<f64> {
    InducingStore { xbar: matrix(z), ybar: vec![0; z.len()], m_per_class: z.len() }
}

/// `K_mm` with the node's jitter, from the oracle kernel.
fn oracle_kmm(node: &NodeVIModel<f64>, spec: &KernelSpec, z: &[Vec<f64>]) -> oracle::Dense {
    let jitter = node.kmm()[(0, 0)] - spec.outputscale;
    let mut k = oracle_gram(spec, z, z);
    for (i, row) in k.iter_mut().enumerate() {
        row[i] += jitter;
    }
    k
}

#[test]
fn predictive_matches_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=3);
        let spec = raw_rbf(rng.random_range(0.7..1.5), rng.random_range(0.5..3.0));
        let z = random_points(m, 2, 2.0, &mut rng);
        let mu: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = random_spd(m, &mut rng);
        let node = node_at(spec, &z, mu.clone(), &sigma);
        let k = oracle_kmm(&node, &spec, &z);
        let kinv = oracle::inverse(&k);
        for _ in 0..5 {
            let xs = random_points(1, 2, 2.0, &mut rng).pop().unwrap();
            let kstar: Vec<f64> = oracle_gram(&spec, &z, std::slice::from_ref(&xs)).iter().map(|r| r[0]).collect();
            let a = oracle::matvec(&kinv, &kstar);
            let mu_o = oracle::dotv(&a, &mu);
            let var_o = (spec.outputscale - oracle::dotv(&a, &oracle::matvec(&oracle::sub(&k, &sigma), &a))).max(0.0);
            let (mu_n, var_n) = node.predictive_posterior_vi(&xs).unwrap();
            worst = worst.max((mu_n - mu_o).abs()).max((var_n - var_o).abs());
        }
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn prior_state_returns_prior_moments_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let m = rng.random_range(1..=3);
        let spec = raw_rbf(rng.random_range(0.3..2.0), rng.random_range(0.5..3.0));
        let z = random_points(m, 3, 2.0, &mut rng);
        let node = NodeVIModel::new(&store(&z), &(0..m).collect::<Vec<_>>(), &spec, PredictMode::Quadrature, 20).unwrap();
        let xs = random_points(1, 3, 2.0, &mut rng).pop().unwrap();
        let (mu, var) = node.predictive_posterior_vi(&xs).unwrap();
        assert_eq!(mu, 0.0);
        assert_eq!(var, spec.outputscale);
    }
}

#[test]
fn expectation_term_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = raw_rbf(1.0, 2.0);
    let z = vec![vec![-0.5, 0.2], vec![0.8, -0.3]];
    let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.4], vec![0.6, -0.9]];
    let y = [true, false, true, false];
    let mu = vec![0.4, -0.7];
    let sigma = vec![vec![0.6, 0.2], vec![0.2, 0.9]];
    let node = node_at(spec, &z, mu.clone(), &sigma);
    let batch = node.batch(&matrix(&x), &y).unwrap();
    let aug = BatchAugState::from_c(vec![0.5, 1.3, 2.0, 0.9]);
    let terms = node.elbo_terms(&batch, &aug, x.len());

    let kinv = oracle::inverse(&oracle_kmm(&node, &spec, &z));
    let kxz = oracle_gram(&spec, &x, &z);
    let a: Vec<Vec<f64>> = kxz.iter().map(|k| oracle::matvec(&kinv, k)).collect();
    let q: Vec<f64> = (0..x.len()).map(|i| (spec.outputscale - oracle::dotv(&kxz[i], &a[i])).max(0.0)).collect();
    let lambda: Vec<f64> = aug.c.iter().map(|&c| (c / 2.0).tanh() / (2.0 * c)).collect();
    let kappa: Vec<f64> = y.iter().map(|&v| if v { 0.5 } else { -0.5 }).collect();
    let sampler = oracle::GaussianSampler::new(mu, &sigma);
    let samples = 1_000_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let u = sampler.sample(&mut rng);
        let mut v = 0.0;
        for i in 0..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let f = oracle::dotv(&a[i], &u) + q[i].sqrt() * e;
            v += -std::f64::consts::LN_2 + kappa[i] * f - 0.5 * lambda[i] * f * f;
        }
        s1 += v;
        s2 += v * v;
    }
    let est = s1 / samples as f64;
    let se = ((s2 / samples as f64 - est * est) / samples as f64).sqrt();
    assert!((terms.expectation - est).abs() < 3.0 * se, "{} vs {est} ± {se}", terms.expectation);
}

fn node_problem(seed: u64, n: usize, m: usize) -> (NodeVIModel<f64>, Matrix<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_points(n, 2, 2.0, &mut rng);
    let y: Vec<bool> = x.iter().map(|p| p[0] - 0.5 * p[1] + 0.3 * rng.random_range(-1.0..1.0) > 0.0).collect();
    let spec = raw_rbf(1.0, 3.0);
    let node = NodeVIModel::new(&store(&x[..m]), &(0..m).collect::<Vec<_>>(), &spec, PredictMode::Quadrature, 20).unwrap();
    (node, matrix(&x), y)
}

#[test]
fn update_c_never_decreases_the_bound() {
    let (mut node, x, y) = node_problem(21, 20, 5);
    let batch = node.batch(&x, &y).unwrap();
    let mut aug = node.update_c(&batch);
    for step in 0..50 {
        node.natural_gradient_step(&batch, &aug, 0.3, y.len()).unwrap();
        let before = node.elbo(&batch, &aug, y.len());
        aug = node.update_c(&batch);
        let after = node.elbo(&batch, &aug, y.len());
        assert!(after >= before - 1e-9, "step {step}: {before} -> {after}");
    }
}

#[test]
fn precision_stays_positive_definite() {
    let (mut node, x, y) = node_problem(22, 40, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut order: Vec<usize> = (0..y.len()).collect();
    for _ in 0..100 {
        order.shuffle(&mut rng);
        let idx = &order[..8];
        let labels: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
        let batch = node.batch(&x.select_rows(idx), &labels).unwrap();
        let aug = node.update_c(&batch);
        node.natural_gradient_step(&batch, &aug, 0.05, y.len()).unwrap();
        assert!(node.min_precision_pivot() > 0.0);
    }
}

#[test]
fn bound_stays_below_the_exact_marginal() {
    let (mut node, x, y) = node_problem(23, 8, 3);
    let batch = node.batch(&x, &y).unwrap();
    let mut aug = node.update_c(&batch);
    for _ in 0..40 {
        node.natural_gradient_step(&batch, &aug, 1.0, y.len()).unwrap();
        aug = node.update_c(&batch);
    }
    let elbo = node.elbo(&batch, &aug, y.len());
    let rows: Vec<Vec<f64>> = x.row_iter().map(<[f64]>::to_vec).collect();
    let k = oracle_gram(node.spec(), &rows, &rows);
    let exact = oracle::binary_gp_log_marginal(&k, &y, 200_000, &mut ChaCha8Rng::seed_from_u64(9));
    assert!(elbo <= exact + 0.02, "bound {elbo} above marginal {exact}");
}
