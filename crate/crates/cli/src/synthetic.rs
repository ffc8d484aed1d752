//! Gaussian-blob datasets for smoke tests and the acceptance suite.

use gptree::{Dataset, Matrix, RngStream};
use rand_distr::{Distribution, StandardNormal};

use crate::config::SyntheticConfig;

/// Class centers: on a ring when `clusters == 0`, otherwise scattered around
/// `clusters` group centers (class `c` joins group `c % clusters`).
pub fn class_centers(cfg: &SyntheticConfig, rng: &RngStream) -> Vec<Vec<f64>> {
    let mut r = rng.derive_named("centers");
    if cfg.clusters == 0 {
        return (0..cfg.classes)
            .map(|c| {
                let t = std::f64::consts::TAU * c as f64 / cfg.classes as f64;
                let mut v = vec![0.0; cfg.dim];
                v[0] = cfg.radius * t.cos();
                v[1] = cfg.radius * t.sin();
                v
            })
            .collect();
    }
    let mut gauss = |scale: f64| -> Vec<f64> {
        (0..cfg.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                scale * z
            })
            .collect()
    };
    let groups: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| gauss(cfg.radius)).collect();
    (0..cfg.classes)
        .map(|c| groups[c % cfg.clusters].iter().zip(gauss(cfg.class_spread)).map(|(g, o)| g + o).collect())
        .collect()
}

fn sample(centers: &[Vec<f64>], per_class: usize, noise: f64, rng: &mut RngStream) -> Dataset<f64> {
    let dim = centers[0].len();
    let mut values = Vec::with_capacity(centers.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mu {
                let z: f64 = StandardNormal.sample(rng);
                values.push(m + noise * z);
            }
            labels.push(c);
        }
    }
    let x = Matrix::from_vec(labels.len(), dim, values).expect("shape matches");
    Dataset::new(x, labels, centers.len()).expect("labels in range")
}

/// Train and test splits drawn from the same centers.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> (Dataset<f64>, Dataset<f64>) {
    let root = RngStream::new(seed, 0).derive_named("synthetic");
    let centers = class_centers(cfg, &root);
    let train = sample(&centers, cfg.train_per_class, cfg.noise, &mut root.derive_named("train"));
    let test = sample(&centers, cfg.test_per_class, cfg.noise, &mut root.derive_named("test"));
    (train, test)
}
