//! Alignment primitives: the token corruption kernel, the reconstruction
//! reward, group-relative advantages and the frozen feature bank that
//! stands in for a perceptual network.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{math, Graph, SeededRng, Tensor, Var};
use crate::synth::ImageSample;
use crate::tokenizer::TokenSeq;
use alloc::vec::Vec;

/// Seed of the frozen feature bank. Never changes.
pub const FEATURE_BANK_SEED: u64 = 0x5EED_F00D;
pub const NUM_FILTERS: usize = 8;
/// Pooled feature width: per-filter spatial mean and standard deviation.
pub const POOLED_DIM: usize = 2 * NUM_FILTERS;

/// Eight random 3x3 filters with bias and a tanh, applied with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatureBank {
    /// `[9, 8]`: tap-major, one column per filter.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Default for FrozenFeatureBank {
    fn default() -> Self {
        Self::new()
    }
}

impl FrozenFeatureBank {
    pub fn new() -> Self {
        let mut rng = SeededRng::new(FEATURE_BANK_SEED, 0);
        let weights = (0..9 * NUM_FILTERS).map(|_| rng.normal() / 3.0).collect();
        let bias = (0..NUM_FILTERS).map(|_| rng.normal() * 0.1).collect();
        Self { weights, bias }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn im2col(batch: usize, side: usize) -> Vec<Option<usize>> {
        let px = side * side;
        let mut idx = Vec::with_capacity(batch * px * 9);
        for b in 0..batch {
            for y in 0..side as isize {
                for x in 0..side as isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (yy, xx) = (y + dy, x + dx);
                            let inside = yy >= 0 && xx >= 0 && yy < side as isize && xx < side as isize;
                            idx.push(inside.then(|| b * px + yy as usize * side + xx as usize));
                        }
                    }
                }
            }
        }
        idx
    }

    /// Feature maps of `[batch, side*side]` pixels as `[batch*side*side, 8]`.
    pub fn features_graph(&self, g: &mut Graph, images: Var, side: usize) -> Var {
        let batch = g.value(images).numel() / (side * side);
        let cols = g.gather(images, Self::im2col(batch, side), &[batch * side * side, 9]);
        let w = g.constant(Tensor::new(&[9, NUM_FILTERS], self.weights.clone()).unwrap());
        let b = g.constant(Tensor::from_vec(self.bias.clone()));
        let pre = g.linear(cols, w, b);
        g.tanh(pre)
    }

    /// Same maps as [`Self::features_graph`], computed directly: `[side*side][8]` flattened.
    pub fn features(&self, image: &Image) -> Vec<f64> {
        let side = image.side() as isize;
        let px = image.pixels();
        let mut out = Vec::with_capacity(px.len() * NUM_FILTERS);
        let mut taps = [0.0f64; 9];
        for y in 0..side {
            for x in 0..side {
                let mut t = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < side && xx < side;
                        taps[t] = if inside { px[(yy * side + xx) as usize] } else { 0.0 };
                        t += 1;
                    }
                }
                for f in 0..NUM_FILTERS {
                    let mut acc = 0.0;
                    for (k, tap) in taps.iter().enumerate() {
                        acc += tap * self.weights[k * NUM_FILTERS + f];
                    }
                    out.push(math::tanh(acc + self.bias[f]));
                }
            }
        }
        out
    }

    /// Per-filter spatial mean followed by per-filter population std.
    pub fn pooled(&self, image: &Image) -> [f64; POOLED_DIM] {
        let f = self.features(image);
        let n = (f.len() / NUM_FILTERS) as f64;
        let mut out = [0.0; POOLED_DIM];
        for k in 0..NUM_FILTERS {
            let mean = f.iter().skip(k).step_by(NUM_FILTERS).sum::<f64>() / n;
            let var = f.iter().skip(k).step_by(NUM_FILTERS).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out[k] = mean;
            out[NUM_FILTERS + k] = math::sqrt(var);
        }
        out
    }

    /// Mean squared difference of the feature maps of two images.
    pub fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_shape(b)?;
        let (fa, fb) = (self.features(a), self.features(b));
        Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64)
    }
}

/// Per-position replacement channel with rate `xi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub xi: f64,
    pub vocab_size: usize,
}

impl CorruptionSpec {
    pub fn new(xi: f64, vocab_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&xi) {
            return Err(Error::InvalidConfig(alloc::format!("xi must lie in [0, 1], got {xi}")));
        }
        if vocab_size == 0 {
            return Err(Error::InvalidConfig(alloc::string::String::from("vocabulary must be non-empty")));
        }
        Ok(Self { xi, vocab_size })
    }
}

/// Keeps each token with probability `1 - xi`, otherwise replaces it with a
/// uniform draw from the other `K - 1` tokens.
pub fn corrupt(x_star: &TokenSeq, spec: CorruptionSpec, rng: &mut SeededRng) -> Result<TokenSeq> {
    let k = spec.vocab_size;
    x_star.validate(k)?;
    if spec.xi > 0.0 && k == 1 {
        return Err(Error::NoReplacementToken);
    }
    let mut out = Vec::with_capacity(x_star.len());
    for &t in x_star.as_slice() {
        // Both draws happen at every position so the stream advances the
        // same way whatever the outcome.
        let u = rng.uniform();
        let r = if k > 1 { rng.below(k - 1) } else { 0 };
        if u < spec.xi {
            out.push(if r >= t { r + 1 } else { r });
        } else {
            out.push(t);
        }
    }
    Ok(TokenSeq::new(out))
}

/// Conditional mass of the kernel: `1 - xi` for the kept token and
/// `xi / (K - 1)` for each replacement.
pub fn corruption_pmf(spec: CorruptionSpec, kept: bool) -> Result<f64> {
    if kept {
        return Ok(1.0 - spec.xi);
    }
    if spec.vocab_size < 2 {
        if spec.xi > 0.0 {
            return Err(Error::NoReplacementToken);
        }
        return Ok(0.0);
    }
    Ok(spec.xi / (spec.vocab_size - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardWeights {
    pub lambda_p: f64,
    /// Drops the pixel MSE term when false (reward-composition ablation).
    pub use_mse: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { lambda_p: 0.5, use_mse: true }
    }
}

/// `-(L_MSE + lambda_p * L_p)` between a decoded image and its reference.
pub fn reward(decoded: &Image, reference: &Image, w: RewardWeights, bank: &FrozenFeatureBank) -> Result<f64> {
    decoded.check_same_shape(reference)?;
    let mse = if w.use_mse { decoded.mse(reference)? } else { 0.0 };
    let lp = if w.lambda_p > 0.0 { bank.perceptual_distance(decoded, reference)? } else { 0.0 };
    Ok(-(mse + w.lambda_p * lp))
}

/// Below this population std a group carries no signal.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

/// `(r - mean) / std` with population std, zeroed for degenerate groups,
/// then clamped to `[-max_clip, max_clip]`.
pub fn group_advantages(rewards: &[f64], max_clip: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = math::sqrt(var);
    if !(std >= ADVANTAGE_STD_FLOOR) {
        return alloc::vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| ((r - mean) / std).clamp(-max_clip, max_clip)).collect()
}

/// One reference image with its `G` teacher-forced samples.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub reference: ImageSample,
    pub gt_tokens: TokenSeq,
    pub noisy_tokens: TokenSeq,
    pub samples: Vec<TokenSeq>,
    /// `G x N`, log-probabilities of the sampled tokens under the rollout policy.
    pub old_logprobs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.samples.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_class_image, ClassLabel};
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn bank_is_fixed() {
        assert_eq!(FrozenFeatureBank::new(), FrozenFeatureBank::new());
        assert_eq!(FrozenFeatureBank::new().weights().len(), 72);
    }

    #[test]
    fn graph_features_match_direct() {
        let bank = FrozenFeatureBank::new();
        let imgs: Vec<Image> = [ClassLabel::Disc, ClassLabel::Checker].iter().map(|&c| render_class_image(c, 4).image).collect();
        let mut g = Graph::new();
        let data: Vec<f64> = imgs.iter().flat_map(|i| i.pixels().iter().copied()).collect();
        let x = g.constant(Tensor::new(&[2, 256], data).unwrap());
        let f = bank.features_graph(&mut g, x, 16);
        let fd = g.value(f).data();
        for (i, img) in imgs.iter().enumerate() {
            let direct = bank.features(img);
            for (a, b) in direct.iter().zip(&fd[i * 256 * 8..(i + 1) * 256 * 8]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn corrupt_identity_and_forced_flip() {
        let mut rng = SeededRng::new(1, 1);
        let x = TokenSeq::new((0..16).map(|i| i % 32).collect());
        assert_eq!(corrupt(&x, CorruptionSpec::new(0.0, 32).unwrap(), &mut rng).unwrap(), x);
        let zeros = TokenSeq::new(vec![0; 64]);
        let flipped = corrupt(&zeros, CorruptionSpec::new(1.0, 2).unwrap(), &mut rng).unwrap();
        assert!(flipped.as_slice().iter().all(|&t| t == 1));
    }

    #[test]
    fn corrupt_marginals() {
        let spec = CorruptionSpec::new(0.5, 32).unwrap();
        let mut rng = SeededRng::new(2, 9);
        let x = TokenSeq::new(vec![7; 100_000]);
        let y = corrupt(&x, spec, &mut rng).unwrap();
        let mut counts = [0usize; 32];
        for &t in y.as_slice() {
            counts[t] += 1;
        }
        let n = 100_000.0;
        assert!((counts[7] as f64 / n - 0.5).abs() < 0.01);
        let p = 0.5 / 31.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (k, &c) in counts.iter().enumerate().filter(|(k, _)| *k != 7) {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma, "token {k}: {c}");
        }
    }

    #[test]
    fn pmf_values() {
        let spec = CorruptionSpec::new(0.5, 5).unwrap();
        assert_eq!(corruption_pmf(spec, true).unwrap(), 0.5);
        assert_eq!(corruption_pmf(spec, false).unwrap(), 0.125);
        let lone = CorruptionSpec::new(0.3, 1).unwrap();
        assert!(matches!(corruption_pmf(lone, false), Err(Error::NoReplacementToken)));
        assert!(matches!(corrupt(&TokenSeq::new(vec![0]), lone, &mut SeededRng::new(0, 0)), Err(Error::NoReplacementToken)));
    }

    #[test]
    fn reward_examples() {
        let bank = FrozenFeatureBank::new();
        let img = render_class_image(ClassLabel::Blobs, 1).image;
        assert_eq!(reward(&img, &img, RewardWeights::default(), &bank).unwrap(), 0.0);
        let w = RewardWeights { lambda_p: 0.0, use_mse: true };
        let r = reward(&Image::filled(16, 0.0), &Image::filled(16, 1.0), w, &bank).unwrap();
        assert_eq!(r, -1.0);
        assert!(reward(&Image::filled(8, 0.0), &img, w, &bank).is_err());
    }

    #[test]
    fn reward_monotone_along_segment() {
        let bank = FrozenFeatureBank::new();
        let w = RewardWeights { lambda_p: 0.0, use_mse: true };
        let a = render_class_image(ClassLabel::Disc, 2).image;
        let b = render_class_image(ClassLabel::Checker, 3).image;
        let mut last = f64::NEG_INFINITY;
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let px = a.pixels().iter().zip(b.pixels()).map(|(x, y)| x + t * (y - x)).collect();
            let r = reward(&Image::new(16, px).unwrap(), &b, w, &bank).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0; 4], 5.0), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.0, 1.0], 5.0), vec![-1.0, 1.0]);
        let a = group_advantages(&[1.0, 2.0, 3.0, 4.0], 5.0);
        for (x, y) in a.iter().zip([-1.34164, -0.44721, 0.44721, 1.34164]) {
            assert!((x - y).abs() < 1e-5);
        }
        let mut lone = vec![0.0; 37];
        lone.push(1.0);
        assert_eq!(*group_advantages(&lone, 5.0).last().unwrap(), 5.0);
    }

    proptest! {
        #[test]
        fn advantages_normalised(rewards in proptest::collection::vec(-10.0f64..10.0, 2..16), shift in -100.0f64..100.0, scale in 0.01f64..100.0) {
            let a = group_advantages(&rewards, f64::INFINITY);
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-12);
            if a.iter().any(|&v| v != 0.0) {
                let std = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-9);
                let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
                let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
                for (x, y) in a.iter().zip(group_advantages(&shifted, f64::INFINITY)) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                for (x, y) in a.iter().zip(group_advantages(&scaled, f64::INFINITY)) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn pmf_normalises(xi in 0.0f64..=1.0, k in 2usize..64) {
            let spec = CorruptionSpec::new(xi, k).unwrap();
            let total = corruption_pmf(spec, true).unwrap() + (k - 1) as f64 * corruption_pmf(spec, false).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn advantages_bounded_by_clip(rewards in proptest::collection::vec(-1.0f64..1.0, 2..32), clip in 0.1f64..5.0) {
            for a in group_advantages(&rewards, clip) {
                prop_assert!(a.abs() <= clip);
            }
        }
    }
}
