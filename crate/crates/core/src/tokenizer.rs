//! Micro VQ tokenizer: a per-patch MLP encoder, a nearest-neighbour
//! quantizer over a learned codebook, and a mirrored MLP decoder.
//!
//! Patches are taken in raster order, so a `16x16` image with `4x4` patches
//! becomes a sequence of 16 tokens. The decoder ends in a sigmoid, keeping
//! pixels in `[0, 1]`.

use crate::align::FrozenFeatureBank;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{Bound, Graph, ParamStore, SeededRng, Tensor, Var};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// A sequence of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    /// Builds a sequence after checking every index against `vocab`.
    pub fn checked(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        let seq = Self(tokens);
        seq.validate(vocab)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::TokenOutOfVocabulary { token, vocab }),
            None => Ok(()),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl core::ops::Index<usize> for TokenSeq {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub beta_commit: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            hidden: 32,
            latent_dim: 8,
            codebook_size: 32,
            lambda_p: 0.5,
            lambda_q: 1.0,
            beta_commit: 0.25,
        }
    }
}

impl TokenizerConfig {
    /// Four 8x8 patches and six codes: small enough to enumerate all
    /// `6^4` token sequences.
    pub fn tiny() -> Self {
        Self { patch_side: 8, hidden: 8, latent_dim: 4, codebook_size: 6, ..Self::default() }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::InvalidConfig(String::from("patch side must divide image side")));
        }
        if self.hidden == 0 || self.latent_dim == 0 || self.codebook_size == 0 {
            return Err(Error::InvalidConfig(String::from("tokenizer widths must be positive")));
        }
        if self.lambda_p < 0.0 || self.lambda_q < 0.0 || self.beta_commit < 0.0 {
            return Err(Error::InvalidConfig(String::from("loss weights must be nonnegative")));
        }
        Ok(())
    }

    /// Flat pixel index of element `j` of patch `p`, patches in raster order.
    fn pixel_of(&self, p: usize, j: usize) -> usize {
        let (g, s) = (self.grid(), self.patch_side);
        let (pr, pc) = (p / g, p % g);
        let (r, c) = (j / s, j % s);
        (pr * s + r) * self.image_side + pc * s + c
    }

    /// Gather index turning `[batch, side*side]` pixels into
    /// `[batch * N, patch*patch]` patch rows.
    fn patchify_index(&self, batch: usize) -> Vec<Option<usize>> {
        let (n, pp, px) = (self.num_patches(), self.patch_pixels(), self.image_side * self.image_side);
        let mut idx = Vec::with_capacity(batch * n * pp);
        for b in 0..batch {
            for p in 0..n {
                idx.extend((0..pp).map(|j| Some(b * px + self.pixel_of(p, j))));
            }
        }
        idx
    }

    /// Inverse of [`Self::patchify_index`].
    fn unpatchify_index(&self, batch: usize) -> Vec<Option<usize>> {
        let (n, pp, px) = (self.num_patches(), self.patch_pixels(), self.image_side * self.image_side);
        let mut idx = vec![None; batch * px];
        for b in 0..batch {
            for p in 0..n {
                for j in 0..pp {
                    idx[b * px + self.pixel_of(p, j)] = Some((b * n + p) * pp + j);
                }
            }
        }
        idx
    }
}

/// Patch latents in raster order, `N x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub n: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }
}

/// k-means++ seeding: `k` rows of `points` (`dim` wide), each drawn with
/// probability proportional to its squared distance from the rows already
/// chosen. Once every point coincides with a chosen row, later picks are
/// uniform. A little jitter keeps such repeated rows distinct.
fn kmeans_pp_seeds(points: &[f64], dim: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut out = Vec::with_capacity(k * dim);
    let mut d2 = alloc::vec![f64::INFINITY; n];
    let mut pick = rng.below(n);
    for _ in 0..k {
        let chosen = row(pick);
        out.extend(chosen.iter().map(|v| v + 0.01 * rng.normal()));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(row(i), chosen));
        }
        let total: f64 = d2.iter().sum();
        pick = if total > 0.0 {
            let probs: Vec<f64> = d2.iter().map(|d| d / total).collect();
            crate::num::categorical_sample(&probs, rng)?
        } else {
            rng.below(n)
        };
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub cfg: TokenizerConfig,
    pub store: ParamStore,
}

fn init_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

impl TokenizerParams {
    /// Random weights. With `data`, the codebook rows are k-means++ seeds
    /// over the encoder outputs of every patch of `data`; otherwise they are
    /// drawn from a small normal.
    pub fn init(cfg: TokenizerConfig, rng: &mut SeededRng, data: Option<&[Image]>) -> Result<Self> {
        cfg.validate()?;
        let (pp, h, c, k) = (cfg.patch_pixels(), cfg.hidden, cfg.latent_dim, cfg.codebook_size);
        let mut store = ParamStore::new();
        let inv = |n: usize| 1.0 / crate::num::math::sqrt(n as f64);
        store.insert("enc.w1", init_matrix(pp, h, inv(pp), rng));
        store.insert("enc.b1", Tensor::zeros(&[h]));
        store.insert("enc.w2", init_matrix(h, c, inv(h), rng));
        store.insert("enc.b2", Tensor::zeros(&[c]));
        store.insert("dec.w1", init_matrix(c, h, inv(c), rng));
        store.insert("dec.b1", Tensor::zeros(&[h]));
        store.insert("dec.w2", init_matrix(h, pp, inv(h), rng));
        store.insert("dec.b2", Tensor::zeros(&[pp]));
        store.insert("codebook", init_matrix(k, c, 0.1, rng));
        let mut params = Self { cfg, store };
        if let Some(images) = data.filter(|d| !d.is_empty()) {
            let latents: Vec<f64> = params.encode_batch(images)?.into_iter().flat_map(|z| z.data).collect();
            params.store.insert("codebook", Tensor::new(&[k, c], kmeans_pp_seeds(&latents, c, k, rng)?).unwrap());
        }
        Ok(params)
    }

    /// All-zero weights, mostly useful in tests.
    pub fn zeros(cfg: TokenizerConfig) -> Self {
        let mut rng = SeededRng::new(0, 0);
        let mut p = Self::init(cfg, &mut rng, None).expect("valid config");
        for (_, t) in p.store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get("codebook").unwrap()
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encode(&self, image: &Image) -> Result<LatentGrid> {
        let mut out = self.encode_batch(core::slice::from_ref(image))?;
        Ok(out.pop().unwrap())
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<LatentGrid>> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, |_| false);
        let x = images_var(&mut g, &self.cfg, images)?;
        let z = encode_graph(&mut g, &b, &self.cfg, x, images.len());
        let (n, c) = (self.cfg.num_patches(), self.cfg.latent_dim);
        let zd = g.value(z).data();
        Ok((0..images.len()).map(|i| LatentGrid { n, c, data: zd[i * n * c..(i + 1) * n * c].to_vec() }).collect())
    }

    /// Nearest codebook row per latent under squared Euclidean distance,
    /// ties toward the lowest index.
    pub fn quantize(&self, z: &LatentGrid) -> (TokenSeq, LatentGrid) {
        let cb = self.codebook();
        let tokens: Vec<usize> = (0..z.n).map(|i| nearest_code(cb, z.row(i))).collect();
        let mut data = Vec::with_capacity(z.n * z.c);
        for &t in &tokens {
            data.extend_from_slice(cb.row(t));
        }
        (TokenSeq(tokens), LatentGrid { n: z.n, c: z.c, data })
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenSeq> {
        Ok(self.quantize(&self.encode(image)?).0)
    }

    pub fn tokenize_batch(&self, images: &[Image]) -> Result<Vec<TokenSeq>> {
        Ok(self.encode_batch(images)?.iter().map(|z| self.quantize(z).0).collect())
    }

    pub fn decode(&self, tokens: &TokenSeq) -> Result<Image> {
        let mut out = self.decode_batch(core::slice::from_ref(tokens))?;
        Ok(out.pop().unwrap())
    }

    pub fn decode_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<Image>> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, |_| false);
        let img = decode_tokens_graph(&mut g, &b, &self.cfg, seqs)?;
        Ok(images_from_var(&g, img, self.cfg.image_side))
    }

    /// Loss value and components on a batch; see [`tokenizer_loss_graph`].
    pub fn loss(&self, images: &[Image], bank: &FrozenFeatureBank) -> Result<(f64, TokenizerLossParts)> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, |_| false);
        let out = tokenizer_loss_graph(&mut g, &b, &self.cfg, bank, images)?;
        Ok((g.value(out.total).item(), out.parts(&g)))
    }
}

pub(crate) fn nearest_code(codebook: &Tensor, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows() {
        let d: f64 = codebook.row(k).iter().zip(z).map(|(e, v)| (e - v) * (e - v)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Stacks images into a constant `[batch, side*side]` leaf.
pub fn images_var(g: &mut Graph, cfg: &TokenizerConfig, images: &[Image]) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let side = cfg.image_side;
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.side() != side {
            return Err(Error::ShapeMismatch { expected: vec![1, side, side], found: vec![1, img.side(), img.side()] });
        }
        if img.pixels().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(g.constant(Tensor::new(&[images.len(), side * side], data).unwrap()))
}

pub fn images_from_var(g: &Graph, v: Var, side: usize) -> Vec<Image> {
    g.value(v).data().chunks(side * side).map(|c| Image::new(side, c.to_vec()).unwrap()).collect()
}

/// Encoder over a `[batch, side*side]` pixel node; returns `[batch*N, C]`.
pub fn encode_graph(g: &mut Graph, b: &Bound, cfg: &TokenizerConfig, images: Var, batch: usize) -> Var {
    let patches = g.gather(images, cfg.patchify_index(batch), &[batch * cfg.num_patches(), cfg.patch_pixels()]);
    let h = g.linear(patches, b.var("enc.w1"), b.var("enc.b1"));
    let h = g.tanh(h);
    g.linear(h, b.var("enc.w2"), b.var("enc.b2"))
}

/// Decoder over `[batch*N, C]` embeddings; returns `[batch, side*side]`.
pub fn decode_graph(g: &mut Graph, b: &Bound, cfg: &TokenizerConfig, emb: Var) -> Var {
    let rows = g.value(emb).rows();
    let batch = rows / cfg.num_patches();
    let h = g.linear(emb, b.var("dec.w1"), b.var("dec.b1"));
    let h = g.tanh(h);
    let o = g.linear(h, b.var("dec.w2"), b.var("dec.b2"));
    let o = g.sigmoid(o);
    let side = cfg.image_side;
    g.gather(o, cfg.unpatchify_index(batch), &[batch, side * side])
}

/// Codebook rows for a batch of token sequences, `[batch*N, C]`.
pub fn embed_tokens_graph(g: &mut Graph, b: &Bound, cfg: &TokenizerConfig, seqs: &[TokenSeq]) -> Result<Var> {
    let n = cfg.num_patches();
    let mut rows = Vec::with_capacity(seqs.len() * n);
    for s in seqs {
        if s.len() != n {
            return Err(Error::ShapeMismatch { expected: vec![n], found: vec![s.len()] });
        }
        s.validate(cfg.codebook_size)?;
        rows.extend_from_slice(s.as_slice());
    }
    Ok(g.select_rows(b.var("codebook"), &rows))
}

pub fn decode_tokens_graph(g: &mut Graph, b: &Bound, cfg: &TokenizerConfig, seqs: &[TokenSeq]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let emb = embed_tokens_graph(g, b, cfg, seqs)?;
    Ok(decode_graph(g, b, cfg, emb))
}

/// Reconstruction loss `MSE + lambda_p * L_p` of decoded `[batch, P]`
/// pixels against fixed targets; returns `(total, mse, perceptual)`.
pub fn reconstruction_loss_graph(
    g: &mut Graph,
    bank: &FrozenFeatureBank,
    decoded: Var,
    targets: Var,
    side: usize,
    lambda_p: f64,
) -> (Var, Var, Var) {
    let mse = g.mse(decoded, targets);
    let fd = bank.features_graph(g, decoded, side);
    let target_feats = bank.features_graph(g, targets, side);
    let ft = g.detach(target_feats);
    let lp = g.mse(fd, ft);
    let wlp = g.scale(lp, lambda_p);
    let total = g.add(mse, wlp);
    (total, mse, lp)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenizerLossParts {
    pub mse: f64,
    pub perceptual: f64,
    pub quant: f64,
    pub codebook: f64,
    pub commit: f64,
}

pub struct TokenizerLossVars {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
    pub quant: Var,
    pub codebook: Var,
    pub commit: Var,
    pub tokens: Vec<TokenSeq>,
}

impl TokenizerLossVars {
    pub fn parts(&self, g: &Graph) -> TokenizerLossParts {
        TokenizerLossParts {
            mse: g.value(self.mse).item(),
            perceptual: g.value(self.perceptual).item(),
            quant: g.value(self.quant).item(),
            codebook: g.value(self.codebook).item(),
            commit: g.value(self.commit).item(),
        }
    }
}

/// `L_MSE + lambda_p * L_p + lambda_q * L_q` over a batch.
///
/// `L_q` averages `|sg[z] - e|^2 + beta_commit * |z - sg[e]|^2` over
/// positions: the first term reaches the codebook only, the second the
/// encoder only. The decoder sees the selected codes in the forward pass and
/// passes its gradient straight to `z`.
pub fn tokenizer_loss_graph(
    g: &mut Graph,
    b: &Bound,
    cfg: &TokenizerConfig,
    bank: &FrozenFeatureBank,
    images: &[Image],
) -> Result<TokenizerLossVars> {
    let x = images_var(g, cfg, images)?;
    let batch = images.len();
    let z = encode_graph(g, b, cfg, x, batch);
    let cb = b.var("codebook");
    let tokens: Vec<usize> = {
        let (zt, cbt) = (g.value(z), g.value(cb));
        (0..zt.rows()).map(|i| nearest_code(cbt, zt.row(i))).collect()
    };
    let e = g.select_rows(cb, &tokens);

    let zs = g.detach(z);
    let d_cb = g.sub(zs, e);
    let d_cb = g.square(d_cb);
    let d_cb = g.sum_last(d_cb);
    let codebook = g.mean(d_cb);
    let es = g.detach(e);
    let d_commit = g.sub(z, es);
    let d_commit = g.square(d_commit);
    let d_commit = g.sum_last(d_commit);
    let commit = g.mean(d_commit);
    let wc = g.scale(commit, cfg.beta_commit);
    let quant = g.add(codebook, wc);

    let e_value = g.value(e).clone();
    let zq = g.straight_through(z, e_value);
    let decoded = decode_graph(g, b, cfg, zq);
    let (rec, mse, perceptual) = reconstruction_loss_graph(g, bank, decoded, x, cfg.image_side, cfg.lambda_p);
    let wq = g.scale(quant, cfg.lambda_q);
    let total = g.add(rec, wq);
    let n = cfg.num_patches();
    let tokens = tokens.chunks(n).map(|c| TokenSeq(c.to_vec())).collect();
    Ok(TokenizerLossVars { total, mse, perceptual, quant, codebook, commit, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::grad_check;
    use crate::synth::{make_dataset, ClassLabel, DatasetSpec};

    fn images(n: usize) -> Vec<Image> {
        make_dataset(DatasetSpec { num_samples_per_class: n, base_seed: 11 }).into_iter().map(|s| s.image).collect()
    }

    fn random_params(cfg: TokenizerConfig, seed: u64) -> TokenizerParams {
        let data: Vec<Image> =
            make_dataset(DatasetSpec { num_samples_per_class: 2, base_seed: 99 }).into_iter().map(|s| s.image).collect();
        TokenizerParams::init(cfg, &mut SeededRng::new(seed, 0), Some(&data)).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_latents() {
        let p = TokenizerParams::zeros(TokenizerConfig::default());
        let z = p.encode(&images(1)[3]).unwrap();
        assert_eq!(z.n, 16);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let p = TokenizerParams::zeros(TokenizerConfig::default());
        let err = p.encode(&Image::filled(8, 0.5)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn latent_depends_only_on_its_patch() {
        let p = random_params(TokenizerConfig::default(), 1);
        let img = images(1)[4].clone();
        let base = p.encode(&img).unwrap();
        let mut px = img.pixels().to_vec();
        // Pixel (9, 13) lies in patch row 3, column 2.
        px[13 * 16 + 9] = 1.0 - px[13 * 16 + 9];
        let probe = p.encode(&Image::new(16, px).unwrap()).unwrap();
        for i in 0..16 {
            if i == 3 * 4 + 2 {
                assert_ne!(base.row(i), probe.row(i));
            } else {
                assert_eq!(base.row(i), probe.row(i));
            }
        }
    }

    #[test]
    fn quantize_single_code_and_exact_match() {
        let cfg = TokenizerConfig { codebook_size: 1, ..TokenizerConfig::default() };
        let p = random_params(cfg, 2);
        let z = p.encode(&images(1)[0]).unwrap();
        assert!(p.quantize(&z).0.as_slice().iter().all(|&t| t == 0));

        let p = random_params(TokenizerConfig::default(), 3);
        let e5 = p.codebook().row(5).to_vec();
        let z = LatentGrid { n: 1, c: 8, data: e5 };
        assert_eq!(p.quantize(&z).0.as_slice(), &[5]);
    }

    #[test]
    fn quantize_tie_goes_to_lowest_index() {
        let mut p = random_params(TokenizerConfig::default(), 4);
        let row = p.codebook().row(9).to_vec();
        let cb = p.store.get_mut("codebook").unwrap();
        cb.data_mut()[2 * 8..3 * 8].copy_from_slice(&row);
        let z = LatentGrid { n: 1, c: 8, data: row };
        assert_eq!(p.quantize(&z).0.as_slice(), &[2]);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let cfg = TokenizerConfig { latent_dim: 2, codebook_size: 4, ..TokenizerConfig::default() };
        let mut rng = SeededRng::new(5, 5);
        for _ in 0..200 {
            let mut p = TokenizerParams::zeros(cfg);
            let cb: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            p.store.insert("codebook", Tensor::new(&[4, 2], cb.clone()).unwrap());
            let z: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
            let grid = LatentGrid { n: 16, c: 2, data: z.clone() };
            let (tokens, q) = p.quantize(&grid);
            for i in 0..16 {
                let dist = |k: usize| (cb[2 * k] - z[2 * i]).powi(2) + (cb[2 * k + 1] - z[2 * i + 1]).powi(2);
                let mut best = 0;
                for k in 1..4 {
                    if dist(k) < dist(best) {
                        best = k;
                    }
                }
                assert_eq!(tokens[i], best);
                assert_eq!(q.row(i), &cb[2 * best..2 * best + 2]);
            }
        }
    }

    #[test]
    fn decode_is_pure_and_bounded() {
        let p = random_params(TokenizerConfig::default(), 6);
        let t = TokenSeq::new((0..16).map(|i| (i * 7) % 32).collect());
        let a = p.decode(&t).unwrap();
        assert_eq!(a, p.decode(&t).unwrap());
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = TokenSeq::new(vec![32; 16]);
        assert!(matches!(p.decode(&bad), Err(Error::TokenOutOfVocabulary { token: 32, vocab: 32 })));
    }

    #[test]
    fn loss_vanishes_at_fixed_point() {
        // Decoder output is a constant 0.5 and the encoder lands on code 0,
        // which is the only code: perfect reconstruction of a flat image.
        let cfg = TokenizerConfig::default();
        let p = TokenizerParams::zeros(cfg);
        let bank = FrozenFeatureBank::new();
        let (total, parts) = p.loss(&[Image::filled(16, 0.5)], &bank).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(parts.mse, 0.0);
        assert_eq!(parts.quant, 0.0);
    }

    #[test]
    fn loss_components_are_nonnegative() {
        let p = random_params(TokenizerConfig::default(), 7);
        let bank = FrozenFeatureBank::new();
        let (_, parts) = p.loss(&images(2), &bank).unwrap();
        for v in [parts.mse, parts.perceptual, parts.quant, parts.codebook, parts.commit] {
            assert!(v >= 0.0);
        }
    }

    fn component_grads(p: &TokenizerParams, which: &str) -> ParamStore {
        let bank = FrozenFeatureBank::new();
        let mut g = Graph::new();
        let b = g.bind(&p.store, |_| true);
        let out = tokenizer_loss_graph(&mut g, &b, &p.cfg, &bank, &images(1)[..2]).unwrap();
        let v = match which {
            "quant" => out.quant,
            "codebook" => out.codebook,
            "commit" => out.commit,
            _ => out.total,
        };
        let grads = g.backward(v);
        b.gradients(&g, &grads)
    }

    #[test]
    fn stop_gradient_structure() {
        let p = random_params(TokenizerConfig::default(), 8);
        let q = component_grads(&p, "quant");
        for path in ["dec.w1", "dec.b1", "dec.w2", "dec.b2"] {
            assert!(q.get(path).unwrap().data().iter().all(|&v| v == 0.0), "{path}");
        }
        let cb = component_grads(&p, "codebook");
        for path in ["enc.w1", "enc.b1", "enc.w2", "enc.b2"] {
            assert!(cb.get(path).unwrap().data().iter().all(|&v| v == 0.0), "{path}");
        }
        assert!(cb.get("codebook").unwrap().data().iter().any(|&v| v != 0.0));
        let commit = component_grads(&p, "commit");
        assert!(commit.get("codebook").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(commit.get("enc.w2").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_check_tiny() {
        let cfg = TokenizerConfig::tiny();
        let p = random_params(cfg, 9);
        let bank = FrozenFeatureBank::new();
        let img = vec![crate::synth::render_class_image(ClassLabel::Disc, 3).image];
        let report = grad_check(
            |g, b| Ok(tokenizer_loss_graph(g, b, &cfg, &bank, &img)?.total),
            &p.store,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batch_decode_matches_single() {
        let p = random_params(TokenizerConfig::default(), 10);
        let seqs: Vec<TokenSeq> = (0..3).map(|s| TokenSeq::new((0..16).map(|i| (i + s * 5) % 32).collect())).collect();
        let batch = p.decode_batch(&seqs).unwrap();
        for (s, img) in seqs.iter().zip(&batch) {
            assert_eq!(&p.decode(s).unwrap(), img);
        }
    }
}
