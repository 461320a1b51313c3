//! Fréchet distance between Gaussians fitted to pooled frozen features.

use crate::align::{FrozenFeatureBank, POOLED_DIM};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::linalg::{sqrt_psd, symmetric_eigen, Mat};
use crate::num::math;
use alloc::vec::Vec;

/// Smallest set either side of [`toy_fid`] accepts.
pub const MIN_FID_SAMPLES: usize = 64;
/// Added to every covariance diagonal so degenerate sets stay well posed.
pub const COV_JITTER: f64 = 1e-6;

/// Mean and (population) covariance of the pooled features of a set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl FeatureStats {
    pub fn from_features(feats: &[[f64; POOLED_DIM]]) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = feats.len() as f64;
        let mut mean = alloc::vec![0.0; POOLED_DIM];
        for f in feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = Mat::zeros(POOLED_DIM);
        for i in 0..POOLED_DIM {
            for j in i..POOLED_DIM {
                let c = feats.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / n;
                cov.set(i, j, c);
                cov.set(j, i, c);
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn from_images(images: &[Image], bank: &FrozenFeatureBank) -> Result<Self> {
        let feats: Vec<_> = images.iter().map(|im| bank.pooled(im)).collect();
        Self::from_features(&feats)
    }

    fn jittered(&self) -> Mat {
        let mut c = self.cov.clone();
        for i in 0..POOLED_DIM {
            c.set(i, i, c.at(i, i) + COV_JITTER);
        }
        c
    }
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let s1 = a.jittered();
    let s2 = b.jittered();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let r = sqrt_psd(&s1);
    let (eig, _) = symmetric_eigen(&r.matmul(&s2).matmul(&r));
    let cross: f64 = eig.iter().map(|&e| math::sqrt(e.max(0.0))).sum();
    mean_term + s1.trace() + s2.trace() - 2.0 * cross
}

/// Toy FID between two image sets of at least [`MIN_FID_SAMPLES`] each.
pub fn toy_fid(real: &[Image], generated: &[Image], bank: &FrozenFeatureBank) -> Result<f64> {
    for set in [real, generated] {
        if set.len() < MIN_FID_SAMPLES {
            return Err(Error::TooFewSamples { needed: MIN_FID_SAMPLES, found: set.len() });
        }
    }
    Ok(frechet_distance(&FeatureStats::from_images(real, bank)?, &FeatureStats::from_images(generated, bank)?))
}
