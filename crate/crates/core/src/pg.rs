//! Pólya-Gamma PG(1, c) variates.
//!
//! Draws use Devroye's alternating-series rejection sampler for the
//! Jacobi distribution J*(1, c/2), returning `J/4`. The proposal is a mixture
//! of a truncated inverse-Gaussian on `(0, t]` and an exponential tail on
//! `(t, ∞)` with `t = 0.64`; the acceptance test evaluates the alternating
//! series for the density until it brackets the uniform draw.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;

use crate::scalar::Real;

const TRUNC: f64 = 0.64;

/// A single PG(1, c) draw; always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgDraw<T>(T);

impl<T: Real> PgDraw<T> {
    pub fn omega(self) -> T {
        self.0
    }
}

/// Mean of PG(b, c): `b/(2c)·tanh(c/2)`, with limit `b/4` at `c = 0`.
pub fn pg_mean<T: Real>(b: T, c: T) -> T {
    let c = c.abs();
    if c < T::lit(1e-6) {
        // series: b/4 (1 - c²/12 + ...)
        return b / T::lit(4.0) * (T::one() - c * c / T::lit(12.0));
    }
    b / (T::lit(2.0) * c) * (c / T::lit(2.0)).tanh()
}

/// Variance of PG(1, c): `(2·tanh(c/2) − c·sech²(c/2)) / (4c³)`.
pub fn pg1_variance(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-2 {
        let c2 = c * c;
        return 1.0 / 24.0 - c2 / 120.0 + 0.001_264_880_952_380_952_4 * c2 * c2;
    }
    let sech2 = 1.0 / (0.5 * c).cosh().powi(2);
    0.25 * (2.0 * (0.5 * c).tanh() - c * sech2) / c.powi(3)
}

/// Draws ω ~ PG(1, c).
pub fn sample_pg1<T: Real, R: Rng + ?Sized>(c: T, rng: &mut R) -> PgDraw<T> {
    PgDraw(T::lit(sample_pg1_f64(c.as_f64(), rng)))
}

/// Independent PG(1, cᵢ) draws, consumed from `rng` in index order.
pub fn sample_pg_vector<T: Real, R: Rng + ?Sized>(c: &[T], rng: &mut R) -> Vec<PgDraw<T>> {
    c.iter().map(|&ci| sample_pg1(ci, rng)).collect()
}

fn sample_pg1_f64<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_tail = exponential_tail_mass(z, fz);
    loop {
        let x = if rng.random::<f64>() < p_tail {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0u32;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Coefficient `aₙ(x)` of the piecewise alternating series for the J*(1) density.
fn series_coef(n: u32, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        let log_a = -1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x;
        log_a.exp()
    } else {
        0.0
    }
}

fn log_norm_cdf(x: f64) -> f64 {
    (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
}

/// Probability of proposing from the exponential tail on `(t, ∞)`.
fn exponential_tail_mass(z: f64, fz: f64) -> f64 {
    let t = TRUNC;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + log_norm_cdf(b);
    let xa = x0 + z + log_norm_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse-Gaussian(1/z, 1) truncated to `(0, t]`.
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    let mu = if z > 0.0 { 1.0 / z } else { f64::INFINITY };
    if mu > t {
        // chi-square-style proposal 1/Gamma(1/2, 1/2) restricted to (0, t], then accept
        loop {
            let (mut e1, mut e2): (f64, f64) = (Exp1.sample(rng), Exp1.sample(rng));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            let x = t / ((1.0 + t * e1) * (1.0 + t * e1));
            let alpha = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= alpha {
                return x;
            }
        }
    } else {
        loop {
            let n: f64 = StandardNormal.sample(rng);
            let y = n * n;
            let mut x = mu + 0.5 * mu * mu * y - 0.5 * mu * (4.0 * mu * y + (mu * y) * (mu * y)).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= t && x > 0.0 {
                return x;
            }
        }
    }
}
