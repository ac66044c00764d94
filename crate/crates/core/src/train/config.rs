use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::GaussianKernelSpec;
use crate::losses::{ColorNorm, ContentNorm, LossProfile, LossWeights};
use crate::nets::{DiscriminatorConfig, GeneratorConfig, VggLayer, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_iters: usize,
    pub d_steps_per_g: usize,
    pub loss_weights: LossWeights,
    pub loss_profile: LossProfile,
    pub content_layer: String,
    pub content_norm: ContentNorm,
    pub color_kernel: GaussianKernelSpec,
    pub color_norm: ColorNorm,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub bn_momentum: f64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            iterations: 20_000,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_iters: 2000,
            d_steps_per_g: 1,
            loss_weights: LossWeights::default(),
            loss_profile: LossProfile::Full,
            content_layer: VggLayer::RELU5_4.to_string(),
            content_norm: ContentNorm::Squared,
            color_kernel: GaussianKernelSpec::default(),
            color_norm: ColorNorm::Sum,
            seed: 0,
            checkpoint_every: 1000,
            bn_momentum: BN_MOMENTUM,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.d_steps_per_g == 0 {
            return bad("d_steps_per_g must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        self.loss_weights.validate()?;
        self.layer()?;
        Ok(())
    }

    pub fn layer(&self) -> Result<VggLayer> {
        self.content_layer.parse()
    }

    pub fn needs_vgg(&self) -> bool {
        self.loss_profile.components().content
    }

    /// SHA-256 of the settings that shape the trajectory. The iteration
    /// budget and checkpoint cadence are excluded so a run can be resumed
    /// with a longer budget.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        c.checkpoint_every = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
