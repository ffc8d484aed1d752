use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Feature matrix with one integer class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    n_classes: usize,
    class_names: Option<Vec<String>>,
}

impl<T: Real> Dataset<T> {
    /// Checks that labels lie in `[0, n_classes)` and match the row count.
    pub fn new(features: Matrix<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelRange { label, n_classes });
        }
        if !features.is_finite() {
            return Err(Error::Format("features contain non-finite values".into()));
        }
        Ok(Self { features, labels, n_classes, class_names: None })
    }

    /// Like [`Dataset::new`] with `n_classes = max label + 1`.
    pub fn from_labels(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(features, labels, n_classes)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {} classes",
                names.len(),
                self.n_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Size of the label space (some classes may have no rows).
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Sorted distinct labels that actually occur.
    pub fn classes_present(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Rows at `idx`, in that order. The label space is kept.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.n()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    /// Appends the rows of `other`, which must share the feature width.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let features = self.features.vstack(&other.features)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            features,
            labels,
            n_classes: self.n_classes.max(other.n_classes),
            class_names: self.class_names.clone().or_else(|| other.class_names.clone()),
        })
    }

    /// Per-class random split; each class with at least two rows keeps at
    /// least one row on both sides. Row order inside each part follows the
    /// original order.
    pub fn split_stratified<R: Rng + ?Sized>(&self, test_fraction: f64, rng: &mut R) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig(format!("test fraction must be in [0, 1), got {test_fraction}")));
        }
        let mut is_test = vec![false; self.n()];
        for c in self.classes_present() {
            let mut idx = self.class_indices(c);
            idx.shuffle(rng);
            let mut n_test = (test_fraction * idx.len() as f64).round() as usize;
            if idx.len() >= 2 {
                n_test = n_test.clamp(usize::from(test_fraction > 0.0), idx.len() - 1);
            } else {
                n_test = 0;
            }
            for &i in &idx[..n_test] {
                is_test[i] = true;
            }
        }
        let train: Vec<usize> = (0..self.n()).filter(|&i| !is_test[i]).collect();
        let test: Vec<usize> = (0..self.n()).filter(|&i| is_test[i]).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }
}
