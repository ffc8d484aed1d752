//! Covariance functions over feature vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, PsdMatrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Linear,
    Rbf,
    Matern52,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored by the linear kernel.
    pub lengthscale: f64,
    pub outputscale: f64,
    pub normalize_inputs: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::rbf(1.0, 4.0)
    }
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64, outputscale: f64) -> Self {
        Self { family: KernelFamily::Rbf, lengthscale, outputscale, normalize_inputs: true }
    }

    pub fn matern52(lengthscale: f64, outputscale: f64) -> Self {
        Self { family: KernelFamily::Matern52, lengthscale, outputscale, normalize_inputs: true }
    }

    pub fn linear(outputscale: f64) -> Self {
        Self { family: KernelFamily::Linear, lengthscale: 1.0, outputscale, normalize_inputs: true }
    }

    /// Kernel used for nodes added during few-shot sessions.
    pub fn novel_session_default() -> Self {
        Self::rbf(1.0, 8.0)
    }

    pub fn with_normalization(mut self, normalize: bool) -> Self {
        self.normalize_inputs = normalize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.outputscale.is_finite() && self.outputscale > 0.0) {
            return Err(Error::InvalidConfig(format!("outputscale must be > 0, got {}", self.outputscale)));
        }
        if self.family != KernelFamily::Linear && !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(Error::InvalidConfig(format!("lengthscale must be > 0, got {}", self.lengthscale)));
        }
        Ok(())
    }

    /// Maps raw features into the kernel's input space (row-normalized if requested).
    pub fn prepare<T: Real>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if self.normalize_inputs {
            normalize_rows(x)
        } else {
            Ok(x.clone())
        }
    }

    pub fn prepare_point<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if !self.normalize_inputs {
            return Ok(x.to_vec());
        }
        let norm = dot(x, x).sqrt();
        if !(norm >= T::lit(1e-12)) {
            return Err(Error::ZeroRow(0));
        }
        Ok(x.iter().map(|&v| v / norm).collect())
    }

    /// Kernel value between two already-prepared points.
    #[inline]
    pub fn eval<T: Real>(&self, a: &[T], b: &[T]) -> T {
        let s = T::lit(self.outputscale);
        match self.family {
            KernelFamily::Linear => s * dot(a, b),
            KernelFamily::Rbf => {
                let l = T::lit(self.lengthscale);
                s * (-squared_distance(a, b) / (T::lit(2.0) * l * l)).exp()
            }
            KernelFamily::Matern52 => {
                let r = squared_distance(a, b).sqrt() / T::lit(self.lengthscale);
                let sqrt5r = T::lit(5f64.sqrt()) * r;
                s * (T::one() + sqrt5r + T::lit(5.0 / 3.0) * r * r) * (-sqrt5r).exp()
            }
        }
    }
}

#[inline]
fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows<T: Real>(x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if !(norm >= T::lit(1e-12)) {
            return Err(Error::ZeroRow(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Cross-covariance between already-prepared inputs.
pub fn gram_prepared<T: Real>(spec: &KernelSpec, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() && a.rows() > 0 && b.rows() > 0 {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs have {} and {} features",
            a.cols(),
            b.cols()
        )));
    }
    let rows: Vec<Vec<T>> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..b.rows()).map(|j| spec.eval(ai, b.row(j))).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(a.rows() * b.rows());
    rows.into_iter().for_each(|r| data.extend(r));
    Matrix::from_vec(a.rows(), b.rows(), data)
}

/// Symmetric Gram matrix of already-prepared inputs; the upper triangle is mirrored.
pub fn gram_square_prepared<T: Real>(spec: &KernelSpec, a: &Matrix<T>) -> PsdMatrix<T> {
    let n = a.rows();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..=i).map(|j| spec.eval(ai, a.row(j))).collect()
        })
        .collect();
    let mut m = Matrix::zeros(n, n);
    for (i, r) in rows.into_iter().enumerate() {
        m.row_mut(i)[..=i].copy_from_slice(&r);
    }
    m.symmetrize_from_lower();
    PsdMatrix::from_symmetric(m)
}

/// `K(A, B)` with entry (i, j) = k(aᵢ, bⱼ); inputs are normalized first when the kernel asks.
pub fn gram<T: Real>(spec: &KernelSpec, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    spec.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs have {} and {} features",
            a.cols(),
            b.cols()
        )));
    }
    gram_prepared(spec, &spec.prepare(a)?, &spec.prepare(b)?)
}

pub fn gram_square<T: Real>(spec: &KernelSpec, a: &Matrix<T>) -> Result<PsdMatrix<T>> {
    spec.validate()?;
    Ok(gram_square_prepared(spec, &spec.prepare(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky_psd, JitterSchedule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let x = normalize_rows(&m(&[&[3.0, 4.0], &[1.0, 0.0]])).unwrap();
        assert!((x[(0, 0)] - 0.6).abs() < 1e-15 && (x[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(x.row(1), &[1.0, 0.0]);
        assert!(matches!(normalize_rows(&m(&[&[1.0, 1.0], &[0.0, 0.0]])), Err(Error::ZeroRow(1))));
    }

    #[test]
    fn rbf_examples() {
        let spec = KernelSpec::rbf(1.0, 2.5);
        let a = m(&[&[0.3, 0.4], &[1.0, 0.0]]);
        let k = gram_square(&spec, &a).unwrap();
        assert_eq!(k.matrix()[(0, 0)], 2.5);
        assert_eq!(k.matrix()[(1, 1)], 2.5);

        let unit = KernelSpec::rbf(1.0, 1.0);
        let k = gram(&unit, &m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((k[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn linear_scaled() {
        let spec = KernelSpec::linear(4.0);
        let k = gram(&spec, &m(&[&[0.0, 2.0]]), &m(&[&[0.0, 5.0]])).unwrap();
        assert_eq!(k[(0, 0)], 4.0);
    }

    #[test]
    fn matern_closed_form() {
        let spec = KernelSpec::matern52(0.5, 2.0).with_normalization(false);
        let k = gram(&spec, &m(&[&[0.0]]), &m(&[&[0.3]])).unwrap();
        let r: f64 = 0.6;
        let expected = 2.0 * (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp();
        assert!((k[(0, 0)] - expected).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let spec = KernelSpec::rbf(1.0, 1.0);
        assert!(matches!(gram(&spec, &m(&[&[1.0, 0.0]]), &m(&[&[1.0]])), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(KernelSpec::rbf(-1.0, 1.0).validate().is_err());
        assert!(KernelSpec::rbf(1.0, 0.0).validate().is_err());
        assert!(KernelSpec::linear(1.0).validate().is_ok());
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn gram_psd_at_300_by_64() {
        let a = random_matrix(300, 64, 1);
        for spec in [KernelSpec::rbf(0.7, 3.0), KernelSpec::matern52(1.3, 2.0), KernelSpec::linear(9.0)] {
            let k = gram_square(&spec, &a).unwrap();
            assert_eq!(k.matrix().max_relative_asymmetry(), 0.0);
            // PSD up to a tiny shift: K + 1e-8·s·I must factor without extra jitter
            let mut shifted = k.matrix().clone();
            shifted.add_diagonal(1e-8 * spec.outputscale);
            let schedule = JitterSchedule::none();
            assert!(cholesky_psd(&PsdMatrix::new(shifted).unwrap(), &schedule).is_ok(), "{spec:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cross_gram_transposes(n in 1usize..12, p in 1usize..12, d in 1usize..6, seed in any::<u64>()) {
            let a = random_matrix(n, d, seed);
            let b = random_matrix(p, d, seed ^ 0xff);
            for spec in [KernelSpec::rbf(0.9, 2.0), KernelSpec::matern52(0.5, 1.5), KernelSpec::linear(4.0)] {
                let ab = gram(&spec, &a, &b).unwrap();
                let ba = gram(&spec, &b, &a).unwrap();
                prop_assert_eq!(ab, ba.transpose());
            }
        }

        #[test]
        fn stationary_entries_bounded(n in 2usize..15, d in 1usize..6, seed in any::<u64>()) {
            let a = random_matrix(n, d, seed);
            for spec in [KernelSpec::rbf(0.9, 2.0), KernelSpec::matern52(0.5, 1.5)] {
                let k = gram_square(&spec, &a).unwrap();
                for i in 0..n {
                    prop_assert_eq!(k.matrix()[(i, i)], spec.outputscale);
                    for j in 0..n {
                        let v = k.matrix()[(i, j)];
                        prop_assert!(v > 0.0 && v <= spec.outputscale);
                    }
                }
            }
        }
    }
}
