//! Sparse variational binary GP at one tree node.
//!
//! The variational posterior over inducing values is `q(f̄) = N(μ̃, Σ̃)`, kept
//! in natural form `η = Σ̃⁻¹μ̃`, `H = −½Σ̃⁻¹`. Each data point carries a
//! variational PG(1, cᵢ) factor whose optimal `cᵢ` has a closed form, so `c`
//! is recomputed for every minibatch rather than stored.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::cluster::kmeans;
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_prepared, gram_square_prepared, KernelSpec};
use crate::linalg::{cholesky_psd, dot, Cholesky, JitterSchedule, Matrix, PsdMatrix};
use crate::node_gibbs::PredictMode;
use crate::pg::pg_mean;
use crate::quadrature::{expected_sigmoid, gauss_hermite, sigmoid, QuadratureRule};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Inducing locations shared by every node, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingStore<T> {
    /// Locations in raw feature space, one row per inducing point.
    pub xbar: Matrix<T>,
    /// Owning class of each row.
    pub ybar: Vec<usize>,
    pub m_per_class: usize,
}

impl<T: Real> InducingStore<T> {
    pub fn len(&self) -> usize {
        self.ybar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.ybar.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Rows owned by any class in `classes`, ascending.
    pub fn rows_for_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.ybar[i])).collect()
    }

    pub fn count_for_class(&self, class: usize) -> usize {
        self.ybar.iter().filter(|&&c| c == class).count()
    }
}

/// Inducing points for every class present in `dataset`.
pub fn init_inducing<T: Real>(dataset: &Dataset<T>, m_per_class: usize, rng: &RngStream) -> Result<InducingStore<T>> {
    init_inducing_for(dataset, &dataset.classes_present(), m_per_class, rng)
}

/// `m_per_class` k-means++/Lloyd centers per listed class, computed on that
/// class's raw features; classes with at most `m_per_class` samples use the
/// samples themselves. Class `c` draws from `rng.derive(c)`.
pub fn init_inducing_for<T: Real>(
    dataset: &Dataset<T>,
    classes: &[usize],
    m_per_class: usize,
    rng: &RngStream,
) -> Result<InducingStore<T>> {
    if m_per_class == 0 {
        return Err(Error::InvalidConfig("m_per_class must be at least 1".into()));
    }
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut ybar = Vec::new();
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &c in &sorted {
        let idx = dataset.class_indices(c);
        if idx.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let pts = dataset.features().select_rows(&idx);
        let centers = if idx.len() <= m_per_class {
            pts
        } else {
            kmeans(&pts, m_per_class, &mut rng.derive(c as u64)).centers
        };
        for r in centers.row_iter() {
            rows.push(r.to_vec());
            ybar.push(c);
        }
    }
    let xbar = if rows.is_empty() { Matrix::zeros(0, dataset.dim()) } else { Matrix::from_rows(&rows)? };
    Ok(InducingStore { xbar, ybar, m_per_class })
}

/// Projection of a minibatch onto a node's inducing points.
#[derive(Clone, Debug)]
pub struct NodeBatch<T> {
    /// Row i is `aᵢ = K_mm⁻¹ k_{m,i}`.
    pub a: Matrix<T>,
    /// `Q_ii = k_ii − k_{i,m} K_mm⁻¹ k_{m,i}`, clamped at zero.
    pub qdiag: Vec<T>,
    pub kappa: Vec<T>,
}

impl<T: Real> NodeBatch<T> {
    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Variational PG parameters for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchAugState<T> {
    pub c: Vec<T>,
    /// `λᵢ = tanh(cᵢ/2) / (2cᵢ)`, the mean of PG(1, cᵢ).
    pub lambda: Vec<T>,
}

impl<T: Real> BatchAugState<T> {
    pub fn from_c(c: Vec<T>) -> Self {
        let lambda = c.iter().map(|&ci| pg_mean(T::one(), ci)).collect();
        Self { c, lambda }
    }
}

/// The three pieces of the minibatch bound; `elbo = expectation − kl_gauss − kl_pg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms<T> {
    pub expectation: T,
    pub kl_gauss: T,
    pub kl_pg: T,
}

impl<T: Real> ElboTerms<T> {
    pub fn total(&self) -> T {
        self.expectation - self.kl_gauss - self.kl_pg
    }
}

#[derive(Debug)]
pub struct NodeVIModel<T> {
    spec: KernelSpec,
    predict_mode: PredictMode,
    rule: QuadratureRule<T>,
    inducing_rows: Vec<usize>,
    /// Inducing locations in kernel space.
    z: Matrix<T>,
    /// `K_mm` with the factorization jitter added.
    k: Matrix<T>,
    k_chol: Cholesky<T>,
    k_inv: Matrix<T>,
    eta: Vec<T>,
    h: Matrix<T>,
    mu: Vec<T>,
    sigma: Matrix<T>,
    /// Factor of `−2H = Σ̃⁻¹`.
    prec_chol: Cholesky<T>,
    k_minus_sigma: Matrix<T>,
    clamped: AtomicUsize,
}

impl<T: Clone> Clone for NodeVIModel<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            predict_mode: self.predict_mode,
            rule: self.rule.clone(),
            inducing_rows: self.inducing_rows.clone(),
            z: self.z.clone(),
            k: self.k.clone(),
            k_chol: self.k_chol.clone(),
            k_inv: self.k_inv.clone(),
            eta: self.eta.clone(),
            h: self.h.clone(),
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            prec_chol: self.prec_chol.clone(),
            k_minus_sigma: self.k_minus_sigma.clone(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

/// Factors a precision `−2H` without regularization; returns it with `H`.
fn factor_precision<T: Real>(mut prec: Matrix<T>) -> Result<(Cholesky<T>, Matrix<T>)> {
    let chol =
        cholesky_psd(&PsdMatrix::from_symmetric(prec.clone()), &JitterSchedule::none()).map_err(|_| Error::PdViolation)?;
    if !chol.factor().is_finite() {
        return Err(Error::PdViolation);
    }
    prec.scale(-T::lit(0.5));
    Ok((chol, prec))
}

fn difference<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut d = a.clone();
    d.add_scaled(-T::one(), b);
    d
}

impl<T: Real> NodeVIModel<T> {
    /// Node over `inducing_rows` of `store`, initialized at the prior
    /// (`μ̃ = 0`, `Σ̃ = K_mm`).
    pub fn new(
        store: &InducingStore<T>,
        inducing_rows: &[usize],
        spec: &KernelSpec,
        predict_mode: PredictMode,
        quadrature_order: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if inducing_rows.is_empty() {
            return Err(Error::InvalidConfig("a variational node needs at least one inducing point".into()));
        }
        let z = spec.prepare(&store.xbar.select_rows(inducing_rows))?;
        let (k, k_chol, k_inv, prec_chol) = Self::prior(spec, &z)?;
        let mut h = k_inv.clone();
        h.scale(-T::lit(0.5));
        let m = inducing_rows.len();
        Ok(Self {
            spec: *spec,
            predict_mode,
            rule: gauss_hermite(quadrature_order)?,
            inducing_rows: inducing_rows.to_vec(),
            z,
            k_minus_sigma: Matrix::zeros(m, m),
            sigma: k.clone(),
            k,
            k_chol,
            k_inv,
            eta: vec![T::zero(); m],
            h,
            mu: vec![T::zero(); m],
            prec_chol,
            clamped: AtomicUsize::new(0),
        })
    }

    /// Jittered `K_mm`, its factor, its inverse and the factor of the inverse.
    /// Jitter escalates until the inverse also factors: a smooth kernel on
    /// clustered inducing points can leave `K_mm` factorable at a condition
    /// number where the computed inverse is no longer positive definite.
    #[allow(clippy::type_complexity)]
    fn prior(spec: &KernelSpec, z: &Matrix<T>) -> Result<(Matrix<T>, Cholesky<T>, Matrix<T>, Cholesky<T>)> {
        let k0 = gram_square_prepared(spec, z);
        let mut last = Error::FactorizationFailure { dim: z.rows(), last_jitter: 0.0 };
        for level in JitterSchedule::default().relative_levels {
            let chol = match cholesky_psd(&k0, &JitterSchedule { relative_levels: vec![level] }) {
                Ok(c) => c,
                Err(e) => {
                    last = e;
                    continue;
                }
            };
            let k_inv = chol.inverse();
            match cholesky_psd(&PsdMatrix::from_symmetric(k_inv.clone()), &JitterSchedule::none()) {
                Ok(prec) if prec.factor().is_finite() => {
                    let mut k = k0.into_matrix();
                    k.add_diagonal(chol.jitter());
                    return Ok((k, chol, k_inv, prec));
                }
                _ => last = Error::FactorizationFailure { dim: z.rows(), last_jitter: chol.jitter().as_f64() },
            }
        }
        Err(last)
    }

    /// Rebuilds a node from stored state; `z` must already be in kernel space.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: KernelSpec,
        predict_mode: PredictMode,
        quadrature_order: usize,
        inducing_rows: Vec<usize>,
        z: Matrix<T>,
        eta: Vec<T>,
        h: Matrix<T>,
        mu: Vec<T>,
        sigma: Matrix<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let m = inducing_rows.len();
        if z.rows() != m || eta.len() != m || mu.len() != m || h.rows() != m || h.cols() != m || sigma.rows() != m {
            return Err(Error::DimensionMismatch("stored variational state has inconsistent sizes".into()));
        }
        let (k, k_chol, k_inv, _) = Self::prior(&spec, &z)?;
        let mut prec = h;
        prec.scale(-T::lit(2.0));
        PsdMatrix::new(prec.clone())?;
        let (prec_chol, h) = factor_precision(prec)?;
        let k_minus_sigma = difference(&k, &sigma);
        Ok(Self {
            spec,
            predict_mode,
            rule: gauss_hermite(quadrature_order)?,
            inducing_rows,
            z,
            k,
            k_chol,
            k_inv,
            eta,
            h,
            mu,
            sigma,
            prec_chol,
            k_minus_sigma,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn predict_mode(&self) -> PredictMode {
        self.predict_mode
    }

    pub fn quadrature_order(&self) -> usize {
        self.rule.order()
    }

    pub fn inducing_rows(&self) -> &[usize] {
        &self.inducing_rows
    }

    pub fn m(&self) -> usize {
        self.inducing_rows.len()
    }

    pub fn inducing_inputs(&self) -> &Matrix<T> {
        &self.z
    }

    pub fn kmm(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn eta(&self) -> &[T] {
        &self.eta
    }

    pub fn h(&self) -> &Matrix<T> {
        &self.h
    }

    pub fn mean(&self) -> &[T] {
        &self.mu
    }

    pub fn cov(&self) -> &Matrix<T> {
        &self.sigma
    }

    /// Number of predictive variances clamped at zero so far.
    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Smallest pivot of the Cholesky factor of `−2H`; positive while `−2H` is PD.
    pub fn min_precision_pivot(&self) -> T {
        self.prec_chol.factor().diagonal().into_iter().fold(T::infinity(), |a, b| a.min(b))
    }

    /// Projects raw inputs with labels (`true` = left) onto the inducing points.
    pub fn batch(&self, x: &Matrix<T>, y: &[bool]) -> Result<NodeBatch<T>> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs but {} labels", x.rows(), y.len())));
        }
        let half = T::lit(0.5);
        let kappa = y.iter().map(|&v| if v { half } else { -half }).collect();
        let (a, qdiag) = self.project(x)?;
        Ok(NodeBatch { a, qdiag, kappa })
    }

    fn project(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        let m = self.m();
        if x.rows() == 0 {
            return Ok((Matrix::zeros(0, m), Vec::new()));
        }
        let p = self.spec.prepare(x)?;
        let kxm = gram_prepared(&self.spec, &p, &self.z)?;
        let rows: Vec<(Vec<T>, T)> = (0..p.rows())
            .into_par_iter()
            .map(|i| {
                let ki = kxm.row(i);
                let ai = self.k_chol.solve(ki);
                let kii = self.spec.eval(p.row(i), p.row(i));
                (ai.clone(), (kii - dot(ki, &ai)).max(T::zero()))
            })
            .collect();
        let mut a = Matrix::zeros(p.rows(), m);
        let mut q = Vec::with_capacity(p.rows());
        for (i, (ai, qi)) in rows.into_iter().enumerate() {
            a.row_mut(i).copy_from_slice(&ai);
            q.push(qi);
        }
        Ok((a, q))
    }

    /// Mean and variance of `f` at each batch point under `q(f̄)`.
    fn marginals(&self, batch: &NodeBatch<T>) -> (Vec<T>, Vec<T>) {
        batch
            .a
            .row_iter()
            .zip(&batch.qdiag)
            .map(|(ai, &q)| (dot(ai, &self.mu), q + dot(ai, &self.sigma.matvec(ai))))
            .unzip()
    }

    /// Closed-form optimal `cᵢ = √(E[fᵢ²])` for each batch point.
    pub fn update_c(&self, batch: &NodeBatch<T>) -> BatchAugState<T> {
        let (mean, var) = self.marginals(batch);
        let c = mean.iter().zip(&var).map(|(&m, &v)| (v + m * m).sqrt()).collect();
        BatchAugState::from_c(c)
    }

    fn scale(batch_len: usize, n_total: usize) -> T {
        T::lit(n_total as f64 / batch_len.max(1) as f64)
    }

    /// `KL(q(f̄) ‖ p(f̄))`.
    pub fn gaussian_kl(&self) -> T {
        let m = self.m();
        let trace: T = (0..m).map(|i| dot(self.k_inv.row(i), self.sigma.row(i))).sum();
        let quad = self.k_chol.inv_quad_form(&self.mu);
        // log|Σ̃| = −log|−2H|
        let half = T::lit(0.5);
        half * (trace + quad - T::lit(m as f64) + self.k_chol.log_det() + self.prec_chol.log_det())
    }

    /// Bound terms with the batch sums scaled by `n_total / |batch|`.
    pub fn elbo_terms(&self, batch: &NodeBatch<T>, aug: &BatchAugState<T>, n_total: usize) -> ElboTerms<T> {
        let s = Self::scale(batch.len(), n_total);
        let (mean, var) = self.marginals(batch);
        let half = T::lit(0.5);
        let ln2 = T::lit(std::f64::consts::LN_2);
        let mut expectation = T::zero();
        let mut kl_pg = T::zero();
        for i in 0..batch.len() {
            let ef2 = var[i] + mean[i] * mean[i];
            expectation += -ln2 + batch.kappa[i] * mean[i] - half * aug.lambda[i] * ef2;
            let c = aug.c[i];
            kl_pg += (half * c).cosh().ln() - T::lit(0.25) * c * (half * c).tanh();
        }
        ElboTerms { expectation: s * expectation, kl_gauss: self.gaussian_kl(), kl_pg: s * kl_pg }
    }

    pub fn elbo(&self, batch: &NodeBatch<T>, aug: &BatchAugState<T>, n_total: usize) -> T {
        self.elbo_terms(batch, aug, n_total).total()
    }

    /// Natural gradients `(η* − η, H* − H)` where
    /// `η* = s·Σ κᵢ aᵢ` and `−2H* = K_mm⁻¹ + s·Σ λᵢ aᵢ aᵢᵀ`, `s = n_total/|batch|`.
    pub fn natural_gradient(&self, batch: &NodeBatch<T>, aug: &BatchAugState<T>, n_total: usize) -> (Vec<T>, Matrix<T>) {
        let (eta_star, h_star) = self.fixed_point(batch, aug, n_total);
        let g_eta = eta_star.iter().zip(&self.eta).map(|(&a, &b)| a - b).collect();
        (g_eta, difference(&h_star, &self.h))
    }

    fn fixed_point(&self, batch: &NodeBatch<T>, aug: &BatchAugState<T>, n_total: usize) -> (Vec<T>, Matrix<T>) {
        let m = self.m();
        let s = Self::scale(batch.len(), n_total);
        let mut eta_star = vec![T::zero(); m];
        let mut prec = Matrix::zeros(m, m);
        for (i, ai) in batch.a.row_iter().enumerate() {
            crate::linalg::axpy(s * batch.kappa[i], ai, &mut eta_star);
            let w = s * aug.lambda[i];
            for r in 0..m {
                let wr = w * ai[r];
                for c in 0..=r {
                    prec[(r, c)] += wr * ai[c];
                }
            }
        }
        prec.symmetrize_from_lower();
        prec.add_scaled(T::one(), &self.k_inv);
        prec.scale(-T::lit(0.5));
        (eta_star, prec)
    }

    /// `η ← η + lr·∇̃η`, `H ← H + lr·∇̃H`. If `−2H` would lose positive
    /// definiteness the state is left unchanged and `PdViolation` returned.
    pub fn natural_gradient_step(
        &mut self,
        batch: &NodeBatch<T>,
        aug: &BatchAugState<T>,
        lr: T,
        n_total: usize,
    ) -> Result<()> {
        if !(lr > T::zero() && lr <= T::one()) {
            return Err(Error::InvalidConfig(format!("learning rate must lie in (0, 1], got {lr}")));
        }
        if batch.is_empty() {
            return Ok(());
        }
        let (eta_star, h_star) = self.fixed_point(batch, aug, n_total);
        let keep = T::one() - lr;
        let eta: Vec<T> = self.eta.iter().zip(&eta_star).map(|(&a, &b)| keep * a + lr * b).collect();
        let mut h = self.h.clone();
        h.scale(keep);
        h.add_scaled(lr, &h_star);
        h.symmetrize_from_lower();
        let mut prec = h;
        prec.scale(-T::lit(2.0));
        let (prec_chol, h) = factor_precision(prec)?;
        self.sigma = prec_chol.inverse();
        self.mu = prec_chol.solve(&eta);
        self.k_minus_sigma = difference(&self.k, &self.sigma);
        self.eta = eta;
        self.h = h;
        self.prec_chol = prec_chol;
        Ok(())
    }

    fn moments(&self, a: &[T], kss: T, kstar: &[T]) -> (T, T) {
        debug_assert_eq!(a.len(), kstar.len());
        let mu = dot(a, &self.mu);
        let var = kss - dot(a, &self.k_minus_sigma.matvec(a));
        if var < T::zero() {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            (mu, T::zero())
        } else {
            (mu, var)
        }
    }

    /// `μ* = aᵀμ̃`, `Σ* = k** − aᵀ(K_mm − Σ̃)a` with `a = K_mm⁻¹ k_{m*}`.
    pub fn predictive_posterior_vi(&self, x_star: &[T]) -> Result<(T, T)> {
        if x_star.len() != self.z.cols() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} features, node expects {}",
                x_star.len(),
                self.z.cols()
            )));
        }
        let p = self.spec.prepare_point(x_star)?;
        let kstar: Vec<T> = self.z.row_iter().map(|r| self.spec.eval(r, &p)).collect();
        let a = self.k_chol.solve(&kstar);
        Ok(self.moments(&a, self.spec.eval(&p, &p), &kstar))
    }

    fn prob(&self, mu: T, var: T) -> T {
        match self.predict_mode {
            PredictMode::Quadrature => expected_sigmoid(mu, var, &self.rule),
            PredictMode::MeanPoint => sigmoid(mu),
        }
    }

    pub fn predict_prob(&self, x_star: &[T]) -> Result<T> {
        let (mu, var) = self.predictive_posterior_vi(x_star)?;
        Ok(self.prob(mu, var))
    }

    /// Probability of going left for every row of raw inputs `x`.
    pub fn predict_probs(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let p = self.spec.prepare(x)?;
        let kxm = gram_prepared(&self.spec, &p, &self.z)?;
        Ok((0..p.rows())
            .into_par_iter()
            .map(|i| {
                let a = self.k_chol.solve(kxm.row(i));
                let (mu, var) = self.moments(&a, self.spec.eval(p.row(i), p.row(i)), kxm.row(i));
                self.prob(mu, var)
            })
            .collect())
    }
}
