//! k-means with k-means++ seeding.

use rand::Rng;

use crate::linalg::Matrix;
use crate::scalar::Real;

const MAX_LLOYD_ITERS: usize = 500;
const SHIFT_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct KMeansResult<T> {
    pub centers: Matrix<T>,
    /// Cluster index per input row.
    pub assignment: Vec<usize>,
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Real>(p: &[T], centers: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, row) in centers.row_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until no center moves by
/// more than 1e-8. Ties go to the lower cluster index; a cluster that loses
/// all its points keeps its previous center.
///
/// Requires `1 <= k <= points.rows()`.
pub fn kmeans<T: Real, R: Rng + ?Sized>(points: &Matrix<T>, k: usize, rng: &mut R) -> KMeansResult<T> {
    let n = points.rows();
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n (k={k}, n={n})");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0])).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // all remaining points coincide with a center: pick any unused row
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)).as_f64());
        }
    }
    let mut centers = points.select_rows(&chosen);
    let mut assignment = vec![0; n];
    for _ in 0..MAX_LLOYD_ITERS {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centers).0;
        }
        let mut sums = Matrix::<T>::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::lit(count as f64);
            let new: Vec<T> = sums.row(c).iter().map(|&s| s * inv).collect();
            shift = shift.max(sq_dist(&new, centers.row(c)).as_f64().sqrt());
            centers.row_mut(c).copy_from_slice(&new);
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    for (i, a) in assignment.iter_mut().enumerate() {
        *a = nearest(points.row(i), &centers).0;
    }
    KMeansResult { centers, assignment }
}
