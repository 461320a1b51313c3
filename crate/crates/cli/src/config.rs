//! Run configuration: a TOML file with one table per stage. Every table
//! has defaults, unknown keys are rejected, and the whole file is
//! validated before any compute starts.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use vapi_core::align::RewardWeights;
use vapi_core::argen::ArConfig;
use vapi_core::synth::NUM_CLASSES;
use vapi_core::tokenizer::TokenizerConfig;
use vapi_core::vapi::{RatioGranularity, RewardTarget, VapiConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerStage,
    pub ar: ArStage,
    pub posttrain: PosttrainStage,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            tokenizer: TokenizerStage::default(),
            ar: ArStage::default(),
            posttrain: PosttrainStage::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_samples_per_class: usize,
    pub heldout_per_class: usize,
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_samples_per_class: 100, heldout_per_class: 100, base_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerStage {
    pub patch_side: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub beta_commit: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TokenizerStage {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            patch_side: t.patch_side,
            hidden: t.hidden,
            latent_dim: t.latent_dim,
            codebook_size: t.codebook_size,
            lambda_p: t.lambda_p,
            lambda_q: t.lambda_q,
            beta_commit: t.beta_commit,
            lr: 2e-3,
            weight_decay: 1e-4,
            steps: 2000,
            batch_size: 16,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

impl TokenizerStage {
    pub fn model(&self) -> TokenizerConfig {
        TokenizerConfig {
            image_side: vapi_core::synth::IMAGE_SIDE,
            patch_side: self.patch_side,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            lambda_p: self.lambda_p,
            lambda_q: self.lambda_q,
            beta_commit: self.beta_commit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArStage {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ablate_context: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for ArStage {
    fn default() -> Self {
        let a = ArConfig::default();
        Self {
            d_model: a.d_model,
            layers: a.layers,
            heads: a.heads,
            ffn_mult: a.ffn_mult,
            ablate_context: false,
            lr: 1e-3,
            weight_decay: 1e-4,
            steps: 5000,
            batch_size: 16,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

/// Post-training methods: VA-π and the two reference baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vapi,
    Ste,
    TokPt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vapi, Method::Ste, Method::TokPt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vapi => "vapi",
            Method::Ste => "ste",
            Method::TokPt => "tok-pt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).with_context(|| format!("unknown method `{s}` (expected vapi, ste or tok-pt)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Token,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Image,
    NoisyDecode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosttrainStage {
    pub method: Method,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub group_size: usize,
    pub beta: f64,
    pub clip_eps: f64,
    pub xi: f64,
    pub max_adv_clip: f64,
    pub inner_epochs: usize,
    pub max_grad_norm: f64,
    pub ratio_granularity: Granularity,
    pub reward_target: Target,
    pub lambda_p: f64,
    pub use_mse: bool,
    pub sample_temperature: f64,
    pub ste_temperature: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for PosttrainStage {
    fn default() -> Self {
        let v = VapiConfig::default();
        Self {
            method: Method::Vapi,
            steps: v.steps,
            batch_size: v.batch_size,
            lr: v.lr,
            weight_decay: v.weight_decay,
            group_size: v.group_size,
            beta: v.beta,
            clip_eps: v.clip_eps,
            xi: v.xi,
            max_adv_clip: v.max_adv_clip,
            inner_epochs: v.inner_epochs,
            max_grad_norm: v.max_grad_norm,
            ratio_granularity: Granularity::Token,
            reward_target: Target::Image,
            lambda_p: v.reward.lambda_p,
            use_mse: v.reward.use_mse,
            sample_temperature: v.sample_temperature,
            ste_temperature: v.ste_temperature,
            checkpoint_every: 50,
            log_every: 10,
        }
    }
}

impl PosttrainStage {
    pub fn vapi(&self) -> VapiConfig {
        VapiConfig {
            group_size: self.group_size,
            beta: self.beta,
            clip_eps: self.clip_eps,
            xi: self.xi,
            lr: self.lr,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            max_adv_clip: self.max_adv_clip,
            inner_epochs: self.inner_epochs,
            max_grad_norm: self.max_grad_norm,
            ratio_granularity: match self.ratio_granularity {
                Granularity::Token => RatioGranularity::Token,
                Granularity::Sequence => RatioGranularity::Sequence,
            },
            reward_target: match self.reward_target {
                Target::Image => RewardTarget::Image,
                Target::NoisyDecode => RewardTarget::NoisyDecode,
            },
            reward: RewardWeights { lambda_p: self.lambda_p, use_mse: self.use_mse },
            sample_temperature: self.sample_temperature,
            ste_temperature: self.ste_temperature,
        }
    }
}

/// Whether evaluation runs the exact enumeration oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// Only when the token space is enumerable.
    Auto,
    /// Always; refused on non-enumerable configs.
    Exact,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub num_generated: usize,
    pub temperature: f64,
    pub sigma: f64,
    pub elbo_images: usize,
    pub elbo_mc: usize,
    pub exposure_images: usize,
    pub exposure_mc: usize,
    pub reward_images: usize,
    pub reward_group: usize,
    pub reward_xi: f64,
    pub oracle: Oracle,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_generated: 800,
            temperature: 1.0,
            sigma: vapi_core::eval::DEFAULT_SIGMA,
            elbo_images: 16,
            elbo_mc: 16,
            exposure_images: 160,
            exposure_mc: 4,
            reward_images: 160,
            reward_group: 8,
            reward_xi: 0.5,
            oracle: Oracle::Auto,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn tokenizer_model(&self) -> TokenizerConfig {
        self.tokenizer.model()
    }

    /// Generator sizes follow the tokenizer: vocabulary = codebook size and
    /// sequence length = patch count.
    pub fn ar_model(&self) -> ArConfig {
        let t = self.tokenizer_model();
        ArConfig {
            vocab: t.codebook_size,
            seq_len: t.num_patches(),
            num_classes: NUM_CLASSES,
            d_model: self.ar.d_model,
            layers: self.ar.layers,
            heads: self.ar.heads,
            ffn_mult: self.ar.ffn_mult,
            ablate_context: self.ar.ablate_context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_samples_per_class == 0 {
            bail!("data.num_samples_per_class must be positive");
        }
        if self.data.heldout_per_class == 0 {
            bail!("data.heldout_per_class must be positive");
        }
        self.tokenizer_model().validate().map_err(anyhow::Error::from).context("tokenizer")?;
        self.ar_model().validate().map_err(anyhow::Error::from).context("ar")?;
        self.posttrain.vapi().validate().map_err(anyhow::Error::from).context("posttrain")?;
        let stages = [
            ("tokenizer", self.tokenizer.lr, self.tokenizer.batch_size, self.tokenizer.checkpoint_every, self.tokenizer.log_every),
            ("ar", self.ar.lr, self.ar.batch_size, self.ar.checkpoint_every, self.ar.log_every),
            ("posttrain", self.posttrain.lr, self.posttrain.batch_size, self.posttrain.checkpoint_every, self.posttrain.log_every),
        ];
        for (name, lr, batch, ckpt, log) in stages {
            if !(lr >= 0.0 && lr.is_finite()) {
                bail!("{name}.lr must be a finite nonnegative number");
            }
            if batch == 0 || ckpt == 0 || log == 0 {
                bail!("{name}: batch_size, checkpoint_every and log_every must be positive");
            }
        }
        let e = &self.eval;
        if !(e.sigma > 0.0) {
            bail!("eval.sigma must be positive");
        }
        if e.num_generated < vapi_core::eval::fid::MIN_FID_SAMPLES {
            bail!("eval.num_generated must be at least {}", vapi_core::eval::fid::MIN_FID_SAMPLES);
        }
        if self.data.heldout_per_class * NUM_CLASSES < vapi_core::eval::fid::MIN_FID_SAMPLES {
            bail!("data.heldout_per_class gives fewer than {} held-out images", vapi_core::eval::fid::MIN_FID_SAMPLES);
        }
        if e.elbo_images == 0 || e.elbo_mc == 0 || e.exposure_images == 0 || e.exposure_mc == 0 {
            bail!("eval sample counts must be positive");
        }
        if e.reward_images == 0 || e.reward_group == 0 || !(0.0..=1.0).contains(&e.reward_xi) {
            bail!("eval reward settings out of range");
        }
        if !(e.temperature >= 0.0) {
            bail!("eval.temperature must be nonnegative");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything that determines the
    /// given stage's result. Output paths and evaluation settings are excluded.
    pub fn stage_hash(&self, stage: Stage) -> [u8; 32] {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            data: &'a DataConfig,
            tokenizer: &'a TokenizerStage,
            ar: Option<&'a ArStage>,
            posttrain: Option<&'a PosttrainStage>,
        }
        let key = Key {
            seed: self.seed,
            data: &self.data,
            tokenizer: &self.tokenizer,
            ar: (stage != Stage::TokPretrain).then_some(&self.ar),
            posttrain: (stage == Stage::Posttrain).then_some(&self.posttrain),
        };
        let json = serde_json::to_vec(&key).expect("hash key serializes");
        Sha256::digest(&json).into()
    }
}

/// Training stages in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    TokPretrain,
    ArPretrain,
    Posttrain,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::TokPretrain, Stage::ArPretrain, Stage::Posttrain];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TokPretrain => "tok-pretrain",
            Stage::ArPretrain => "ar-pretrain",
            Stage::Posttrain => "posttrain",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .with_context(|| format!("unknown stage `{s}` (expected tok-pretrain, ar-pretrain or posttrain)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.ar_model().vocab, 32);
        assert_eq!(cfg.ar_model().seq_len, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[posttrain]\nbta = 0.2\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown field"), "{err:#}");
        assert!(RunConfig::parse("sed = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[data]\nnum_samples_per_class = 0\n").is_err());
        assert!(RunConfig::parse("[posttrain]\ngroup_size = 1\n").is_err());
        assert!(RunConfig::parse("[posttrain]\nmethod = \"ppo\"\n").is_err());
        assert!(RunConfig::parse("[ar]\nheads = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.posttrain.method = Method::TokPt;
        cfg.posttrain.reward_target = Target::NoisyDecode;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn stage_hash_tracks_only_relevant_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.posttrain.beta = 0.5;
        b.eval.seed = 99;
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.stage_hash(Stage::TokPretrain), b.stage_hash(Stage::TokPretrain));
        assert_eq!(a.stage_hash(Stage::ArPretrain), b.stage_hash(Stage::ArPretrain));
        assert_ne!(a.stage_hash(Stage::Posttrain), b.stage_hash(Stage::Posttrain));
        b.seed = 1;
        assert_ne!(a.stage_hash(Stage::TokPretrain), b.stage_hash(Stage::TokPretrain));
    }

    #[test]
    fn names_parse_back() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }
}
