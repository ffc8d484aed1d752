//! Binary GP classifier at one tree node, inferred by block Gibbs sampling
//! over the latent function `f` and the Pólya-Gamma variables `ω`.
//!
//! The prior mean is zero throughout. Every chain starts at `ω = 1/4`
//! (the PG(1, 0) mean) and draws `f | ω` first, then `ω | f`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_prepared, gram_square_prepared, KernelSpec};
use crate::linalg::{cholesky_psd, dot, Cholesky, JitterSchedule, Matrix, PsdMatrix};
use crate::pg::sample_pg_vector;
use crate::quadrature::{expected_sigmoid, gauss_hermite, sigmoid, QuadratureRule, DEFAULT_QUADRATURE_ORDER};
use crate::rng::RngStream;
use crate::scalar::Real;

/// How per-chain Gaussian predictive moments become a probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// `E[σ(f*)]` under the predictive Gaussian, by Gauss-Hermite quadrature.
    #[default]
    Quadrature,
    /// `σ(μ*)`: a single evaluation at the predictive mean.
    MeanPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub n_chains: usize,
    pub n_steps: usize,
    pub predict_mode: PredictMode,
    pub quadrature_order: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { n_chains: 4, n_steps: 1, predict_mode: PredictMode::Quadrature, quadrature_order: DEFAULT_QUADRATURE_ORDER }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::InvalidConfig("n_chains must be at least 1".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        gauss_hermite::<f64>(self.quadrature_order).map(|_| ())
    }
}

/// State of one Gibbs chain. `omega` must stay strictly positive.
#[derive(Clone, Debug)]
pub struct ChainState<T> {
    pub omega: Vec<T>,
    pub f: Vec<T>,
    pub steps_taken: usize,
    pub rng: RngStream,
}

impl<T: Real> ChainState<T> {
    /// Fresh chain at `ω = 1/4`, `f = 0`.
    pub fn initial(n: usize, rng: RngStream) -> Self {
        Self { omega: vec![T::lit(0.25); n], f: vec![T::zero(); n], steps_taken: 0, rng }
    }
}

/// Per-chain factorization of `B = I + Ω^½ K Ω^½` and the predictive weights.
#[derive(Clone, Debug)]
struct ChainCache<T> {
    sqrt_w: Vec<T>,
    lb: Cholesky<T>,
    /// `(K + Ω⁻¹)⁻¹ Ω⁻¹ κ`, so that `μ* = k*ᵀ alpha`.
    alpha: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NodeGibbsModel<T> {
    spec: KernelSpec,
    config: GibbsConfig,
    /// Training inputs in kernel space (normalized if the kernel asks).
    x: Matrix<T>,
    y: Vec<bool>,
    kappa: Vec<T>,
    /// Gram matrix with the factorization jitter already added.
    k: Matrix<T>,
    k_chol: Cholesky<T>,
    rule: QuadratureRule<T>,
    chains: Vec<ChainState<T>>,
    caches: Vec<ChainCache<T>>,
}

fn factor_b<T: Real>(k: &Matrix<T>, sqrt_w: &[T]) -> Result<Cholesky<T>> {
    let n = sqrt_w.len();
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            b[(i, j)] = sqrt_w[i] * k[(i, j)] * sqrt_w[j];
        }
        b[(i, i)] += T::one();
    }
    b.symmetrize_from_lower();
    cholesky_psd(&PsdMatrix::from_symmetric(b), &JitterSchedule::default())
}

fn chain_cache<T: Real>(k: &Matrix<T>, kappa: &[T], omega: &[T]) -> Result<ChainCache<T>> {
    let sqrt_w: Vec<T> = omega.iter().map(|w| w.sqrt()).collect();
    let lb = factor_b(k, &sqrt_w)?;
    let u: Vec<T> = kappa.iter().zip(&sqrt_w).map(|(&k, &s)| k / s).collect();
    let alpha = lb.solve(&u).into_iter().zip(&sqrt_w).map(|(v, &s)| v * s).collect();
    Ok(ChainCache { sqrt_w, lb, alpha })
}

fn standard_normals<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

impl<T: Real> NodeGibbsModel<T> {
    /// Fits a node on raw features `x` with binary targets `y` (true = left).
    ///
    /// Chain `i` draws from `rng.derive(i)`, so results do not depend on how
    /// chains are scheduled.
    pub fn fit(x: &Matrix<T>, y: &[bool], spec: &KernelSpec, cfg: &GibbsConfig, rng: &RngStream) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs but {} labels", x.rows(), y.len())));
        }
        if y.is_empty() || y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::SingleClassNode);
        }
        spec.validate()?;
        cfg.validate()?;
        let prepared = spec.prepare(x)?;
        let n = y.len();
        let chains = (0..cfg.n_chains).map(|c| ChainState::initial(n, rng.derive(c as u64))).collect();
        let mut model = Self::assemble(*spec, *cfg, prepared, y.to_vec(), chains)?;
        let steps = cfg.n_steps;
        let advanced: Result<Vec<ChainState<T>>> = model
            .chains
            .par_iter()
            .map(|chain| {
                let mut chain = chain.clone();
                for _ in 0..steps {
                    model.gibbs_step(&mut chain)?;
                }
                Ok(chain)
            })
            .collect();
        model.chains = advanced?;
        model.refresh_caches()?;
        Ok(model)
    }

    /// Rebuilds a model from stored state. `x` must already be in kernel space.
    pub fn from_parts(
        spec: KernelSpec,
        config: GibbsConfig,
        x: Matrix<T>,
        y: Vec<bool>,
        chains: Vec<ChainState<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if x.rows() != y.len() || chains.iter().any(|c| c.omega.len() != y.len() || c.f.len() != y.len()) {
            return Err(Error::DimensionMismatch("stored node state has inconsistent lengths".into()));
        }
        let mut model = Self::assemble(spec, config, x, y, chains)?;
        model.refresh_caches()?;
        Ok(model)
    }

    fn assemble(
        spec: KernelSpec,
        config: GibbsConfig,
        x: Matrix<T>,
        y: Vec<bool>,
        chains: Vec<ChainState<T>>,
    ) -> Result<Self> {
        let half = T::lit(0.5);
        let kappa = y.iter().map(|&v| if v { half } else { -half }).collect();
        let k0 = gram_square_prepared(&spec, &x);
        let k_chol = cholesky_psd(&k0, &JitterSchedule::default())?;
        let mut k = k0.into_matrix();
        k.add_diagonal(k_chol.jitter());
        let rule = gauss_hermite(config.quadrature_order)?;
        Ok(Self { spec, config, x, y, kappa, k, k_chol, rule, chains, caches: Vec::new() })
    }

    fn refresh_caches(&mut self) -> Result<()> {
        self.caches = self
            .chains
            .par_iter()
            .map(|c| chain_cache(&self.k, &self.kappa, &c.omega))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn config(&self) -> &GibbsConfig {
        &self.config
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    /// Training inputs in kernel space.
    pub fn inputs(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn labels(&self) -> &[bool] {
        &self.y
    }

    pub fn kappa(&self) -> &[T] {
        &self.kappa
    }

    /// Gram matrix of the training inputs including any factorization jitter.
    pub fn kernel_matrix(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn jitter(&self) -> T {
        self.k_chol.jitter()
    }

    pub fn chains(&self) -> &[ChainState<T>] {
        &self.chains
    }

    /// Mean and covariance of `f | y, ω`: `Σκ` and `Σ = (K⁻¹ + Ω)⁻¹`.
    pub fn conditional_f(&self, omega: &[T]) -> Result<(Vec<T>, Matrix<T>)> {
        let n = self.n_train();
        if omega.len() != n {
            return Err(Error::DimensionMismatch(format!("{} PG variables for {n} points", omega.len())));
        }
        let cache = chain_cache(&self.k, &self.kappa, omega)?;
        let mean = self.k.matvec(&cache.alpha);
        // Σ = K − Wᵀ W with W = L_B⁻¹ Ω^½ K
        let mut w = Matrix::zeros(n, n);
        for j in 0..n {
            let col: Vec<T> = (0..n).map(|i| cache.sqrt_w[i] * self.k[(i, j)]).collect();
            let solved = cache.lb.solve_lower(&col);
            for i in 0..n {
                w[(i, j)] = solved[i];
            }
        }
        let mut cov = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: T = (0..n).map(|r| w[(r, i)] * w[(r, j)]).sum();
                cov[(i, j)] = self.k[(i, j)] - s;
            }
        }
        cov.symmetrize_from_lower();
        Ok((mean, cov))
    }

    /// One block Gibbs sweep: `f ~ p(f | y, ω)` then `ω ~ PG(1, f)`.
    ///
    /// The Gaussian draw uses Matheron's rule with the cached prior factor,
    /// so only `B = I + Ω^½ K Ω^½` is factorized per sweep.
    pub fn gibbs_step(&self, chain: &mut ChainState<T>) -> Result<()> {
        let n = self.n_train();
        if chain.omega.len() != n {
            return Err(Error::DimensionMismatch(format!("chain has {} entries, node has {n}", chain.omega.len())));
        }
        let sqrt_w: Vec<T> = chain.omega.iter().map(|w| w.sqrt()).collect();
        let lb = factor_b(&self.k, &sqrt_w)?;
        let z: Vec<T> = standard_normals(n, &mut chain.rng);
        let e: Vec<T> = standard_normals(n, &mut chain.rng);
        let f0 = self.k_chol.mul_lower(&z);
        // residual of the pseudo-observation Ω⁻¹κ against the prior draw plus noise
        let r: Vec<T> = (0..n)
            .map(|i| sqrt_w[i] * (self.kappa[i] / chain.omega[i] - f0[i] - e[i] / sqrt_w[i]))
            .collect();
        let v: Vec<T> = lb.solve(&r).into_iter().zip(&sqrt_w).map(|(a, &s)| a * s).collect();
        let kv = self.k.matvec(&v);
        chain.f = f0.iter().zip(&kv).map(|(&a, &b)| a + b).collect();
        chain.omega = sample_pg_vector(&chain.f, &mut chain.rng).into_iter().map(|d| d.omega()).collect();
        chain.steps_taken += 1;
        Ok(())
    }

    /// `log N(Ω⁻¹κ | 0, K + Ω⁻¹)` including the full Gaussian normalizer.
    pub fn augmented_marginal_loglik(&self, chain: &ChainState<T>) -> Result<T> {
        let cache = chain_cache(&self.k, &self.kappa, &chain.omega)?;
        let n = self.n_train();
        let log_det = cache.lb.log_det() - chain.omega.iter().map(|w| w.ln()).sum::<T>();
        let u: Vec<T> = self.kappa.iter().zip(&cache.sqrt_w).map(|(&k, &s)| k / s).collect();
        let quad = cache.lb.inv_quad_form(&u);
        let two_pi = T::lit(2.0 * std::f64::consts::PI);
        Ok(-T::lit(0.5) * (T::lit(n as f64) * two_pi.ln() + log_det + quad))
    }

    fn moments_from(&self, cache: &ChainCache<T>, kstar: &[T], kss: T) -> (T, T) {
        let mu = dot(kstar, &cache.alpha);
        let scaled: Vec<T> = kstar.iter().zip(&cache.sqrt_w).map(|(&k, &s)| k * s).collect();
        let var = kss - cache.lb.inv_quad_form(&scaled);
        (mu, var.max(T::zero()))
    }

    /// Predictive moments of `f*` under an arbitrary chain state.
    pub fn predictive_posterior(&self, chain: &ChainState<T>, x_star: &[T]) -> Result<(T, T)> {
        let cache = chain_cache(&self.k, &self.kappa, &chain.omega)?;
        let (kstar, kss) = self.cross_kernel(x_star)?;
        Ok(self.moments_from(&cache, &kstar, kss))
    }

    /// Predictive moments under the stored chain `chain_index`.
    pub fn predictive_posterior_chain(&self, chain_index: usize, x_star: &[T]) -> Result<(T, T)> {
        let cache = self.cache(chain_index)?;
        let (kstar, kss) = self.cross_kernel(x_star)?;
        Ok(self.moments_from(cache, &kstar, kss))
    }

    fn cache(&self, chain_index: usize) -> Result<&ChainCache<T>> {
        self.caches
            .get(chain_index)
            .ok_or_else(|| Error::NotFitted(format!("no chain {chain_index} on this node")))
    }

    fn cross_kernel(&self, x_star: &[T]) -> Result<(Vec<T>, T)> {
        if x_star.len() != self.x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} features, node expects {}",
                x_star.len(),
                self.x.cols()
            )));
        }
        let p = self.spec.prepare_point(x_star)?;
        let kstar = self.x.row_iter().map(|r| self.spec.eval(r, &p)).collect();
        Ok((kstar, self.spec.eval(&p, &p)))
    }

    fn prob_from_kernel(&self, kstar: &[T], kss: T) -> T {
        let total: T = self
            .caches
            .iter()
            .map(|cache| {
                let (mu, var) = self.moments_from(cache, kstar, kss);
                match self.config.predict_mode {
                    PredictMode::Quadrature => expected_sigmoid(mu, var, &self.rule),
                    PredictMode::MeanPoint => sigmoid(mu),
                }
            })
            .sum();
        total / T::lit(self.caches.len() as f64)
    }

    /// Probability of `y = 1` (going left), averaged over chains.
    pub fn predict_prob(&self, x_star: &[T]) -> Result<T> {
        let (kstar, kss) = self.cross_kernel(x_star)?;
        Ok(self.prob_from_kernel(&kstar, kss))
    }

    /// `predict_prob` for every row of `x` (raw features).
    pub fn predict_probs(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let p = self.spec.prepare(x)?;
        let kx = gram_prepared(&self.spec, &p, &self.x)?;
        Ok((0..p.rows())
            .into_par_iter()
            .map(|i| {
                let kss = self.spec.eval(p.row(i), p.row(i));
                self.prob_from_kernel(kx.row(i), kss)
            })
            .collect())
    }
}
