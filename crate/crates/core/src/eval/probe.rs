//! Ridge-regression linear probe on pooled frozen features: a class
//! separability check for the synthetic data and a class-fidelity
//! diagnostic for generated images.

use crate::align::{FrozenFeatureBank, POOLED_DIM};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::linalg::{cholesky_solve, Mat};
use crate::num::{argmax, math};
use alloc::vec;
use alloc::vec::Vec;

const DIM: usize = POOLED_DIM + 1;

/// One-vs-rest least squares on standardized features plus a bias column.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: [f64; POOLED_DIM],
    scale: [f64; POOLED_DIM],
    /// `DIM x classes`, row-major.
    weights: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    fn design(&self, f: &[f64; POOLED_DIM]) -> [f64; DIM] {
        let mut x = [1.0; DIM];
        for i in 0..POOLED_DIM {
            x[i] = (f[i] - self.mean[i]) / self.scale[i];
        }
        x
    }

    pub fn fit(features: &[[f64; POOLED_DIM]], labels: &[usize], classes: usize, ridge: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::EmptyBatch);
        }
        let n = features.len() as f64;
        let mut mean = [0.0; POOLED_DIM];
        let mut scale = [0.0; POOLED_DIM];
        for i in 0..POOLED_DIM {
            mean[i] = features.iter().map(|f| f[i]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[i] - mean[i]) * (f[i] - mean[i])).sum::<f64>() / n;
            scale[i] = math::sqrt(var).max(1e-12);
        }
        let mut probe = Self { mean, scale, weights: Vec::new(), classes };
        let mut gram = Mat::zeros(DIM);
        let mut rhs = vec![0.0; DIM * classes];
        for (f, &y) in features.iter().zip(labels) {
            let x = probe.design(f);
            for i in 0..DIM {
                for j in 0..DIM {
                    gram.set(i, j, gram.at(i, j) + x[i] * x[j]);
                }
                rhs[i * classes + y] += x[i];
            }
        }
        for i in 0..POOLED_DIM {
            gram.set(i, i, gram.at(i, i) + ridge);
        }
        probe.weights = cholesky_solve(&gram, &rhs, classes).ok_or(Error::InvalidConfig("probe system is singular".into()))?;
        Ok(probe)
    }

    pub fn predict(&self, f: &[f64; POOLED_DIM]) -> usize {
        let x = self.design(f);
        let scores: Vec<f64> =
            (0..self.classes).map(|c| (0..DIM).map(|i| x[i] * self.weights[i * self.classes + c]).sum()).collect();
        argmax(&scores)
    }

    pub fn accuracy(&self, features: &[[f64; POOLED_DIM]], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &y)| self.predict(f) == y).count();
        hits as f64 / features.len().max(1) as f64
    }
}

/// Fits a probe on `(train, train_labels)` and scores it on `(test, test_labels)`.
pub fn class_probe_accuracy(
    bank: &FrozenFeatureBank,
    train: &[Image],
    train_labels: &[usize],
    test: &[Image],
    test_labels: &[usize],
    classes: usize,
) -> Result<f64> {
    let ftr: Vec<_> = train.iter().map(|im| bank.pooled(im)).collect();
    let fte: Vec<_> = test.iter().map(|im| bank.pooled(im)).collect();
    let probe = LinearProbe::fit(&ftr, train_labels, classes, 1e-3)?;
    Ok(probe.accuracy(&fte, test_labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DatasetSpec, NUM_CLASSES};

    fn split(seed: u64, per: usize) -> (Vec<Image>, Vec<usize>) {
        make_dataset(DatasetSpec { num_samples_per_class: per, base_seed: seed }).into_iter().map(|s| (s.image, s.label.id())).unzip()
    }

    #[test]
    fn synthetic_classes_are_linearly_separable() {
        let (tr, ytr) = split(1, 50);
        let (te, yte) = split(2, 50);
        let acc = class_probe_accuracy(&FrozenFeatureBank::new(), &tr, &ytr, &te, &yte, NUM_CLASSES).unwrap();
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn probe_fits_its_training_set() {
        let (tr, ytr) = split(3, 20);
        let bank = FrozenFeatureBank::new();
        let f: Vec<_> = tr.iter().map(|im| bank.pooled(im)).collect();
        let probe = LinearProbe::fit(&f, &ytr, NUM_CLASSES, 1e-3).unwrap();
        assert!(probe.accuracy(&f, &ytr) > 0.95);
    }
}
