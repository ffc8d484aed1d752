//! Gauss-Hermite quadrature and logistic helpers.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_QUADRATURE_ORDER: usize = 20;
pub const MAX_QUADRATURE_ORDER: usize = 100;

/// Physicists' Gauss-Hermite rule: `∫ g(x) e^{-x²} dx ≈ Σ wᵢ g(xᵢ)`.
///
/// Nodes are stored in ascending order and are exactly antisymmetric
/// (`nodes[i] == -nodes[n-1-i]`), with matching weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
    weight_sum: T,
}

impl<T: Real> QuadratureRule<T> {
    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Applies the rule to `g` against the weight `e^{-x²}`.
    pub fn integrate(&self, mut g: impl FnMut(T) -> T) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }
}

/// Computes the `order`-point rule by Newton iteration on orthonormal Hermite
/// polynomials, seeded with the usual asymptotic root estimates.
pub fn gauss_hermite<T: Real>(order: usize) -> Result<QuadratureRule<T>> {
    if order == 0 || order > MAX_QUADRATURE_ORDER {
        return Err(Error::InvalidQuadratureOrder(order));
    }
    let n = order;
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    // roots were generated largest first
    x.reverse();
    w.reverse();
    let nodes: Vec<T> = x.into_iter().map(T::lit).collect();
    let weights: Vec<T> = w.into_iter().map(T::lit).collect();
    let weight_sum = weights.iter().copied().sum();
    Ok(QuadratureRule { nodes, weights, weight_sum })
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `E[σ(f)]` for `f ~ Normal(mu, var)` via the change of variables
/// `f = mu + √(2·var)·x`. Normalizing by the rule's weight sum keeps
/// `E(mu) + E(-mu) = 1` to rounding.
pub fn expected_sigmoid<T: Real>(mu: T, var: T, rule: &QuadratureRule<T>) -> T {
    let var = var.max(T::zero());
    if var == T::zero() {
        return sigmoid(mu);
    }
    let s = (T::lit(2.0) * var).sqrt();
    let mut total = T::zero();
    let n = rule.order();
    // pair symmetric nodes so the sum is antisymmetric in mu to rounding
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let w = rule.weights[i];
        total += w * (sigmoid(mu + s * rule.nodes[i]) + sigmoid(mu + s * rule.nodes[j]));
    }
    if n % 2 == 1 {
        total += rule.weights[n / 2] * sigmoid(mu);
    }
    total / rule.weight_sum
}
