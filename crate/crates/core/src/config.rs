//! Run configuration. Every struct rejects unknown keys so a typo in a config
//! file surfaces as a schema error naming the field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// CLIP image normalization constants.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact (erf) GELU, as used by OpenCLIP-trained towers.
    Gelu,
    /// `x * sigmoid(1.702 x)`, as used by the original OpenAI weights.
    QuickGelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Shape of the frozen dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub text_dim: usize,
    pub vision_dim: usize,
    /// Width of the shared image/text space.
    pub embed_dim: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub text_heads: usize,
    pub vision_heads: usize,
    pub patch_size: usize,
    pub input_resolution: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Number of leading layers (in both towers) that receive fresh prompt blocks.
    pub prompt_depth: usize,
    pub layer_norm_eps: f64,
}

impl BackboneConfig {
    /// OpenCLIP ViT-B-16-plus-240.
    pub fn vit_b16_plus() -> Self {
        Self {
            text_dim: 640,
            vision_dim: 896,
            embed_dim: 640,
            text_layers: 12,
            vision_layers: 12,
            text_heads: 10,
            vision_heads: 14,
            patch_size: 16,
            input_resolution: 240,
            context_length: 77,
            vocab_size: 49408,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            prompt_depth: 9,
            layer_norm_eps: 1e-5,
        }
    }

    /// Small randomly initialized dual encoder for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            text_dim: 32,
            vision_dim: 48,
            embed_dim: 32,
            text_layers: 4,
            vision_layers: 4,
            text_heads: 4,
            vision_heads: 4,
            patch_size: 16,
            input_resolution: 240,
            context_length: 32,
            vocab_size: crate::backbone::tokenizer::builtin_vocab_len(),
            mlp_ratio: 4,
            activation: Activation::Gelu,
            prompt_depth: 3,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        let g = self.input_resolution / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let max_depth = self.text_layers.min(self.vision_layers);
        if self.prompt_depth < 1 || self.prompt_depth > max_depth {
            return Err(Error::config(format!(
                "prompt_depth must be in [1, {max_depth}], got {}",
                self.prompt_depth
            )));
        }
        if self.patch_size == 0 || self.input_resolution % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input_resolution {} is not a multiple of patch_size {}",
                self.input_resolution, self.patch_size
            )));
        }
        if self.text_dim % self.text_heads != 0 {
            return Err(Error::config(format!(
                "text_dim {} not divisible by text_heads {}",
                self.text_dim, self.text_heads
            )));
        }
        if self.vision_dim % self.vision_heads != 0 {
            return Err(Error::config(format!(
                "vision_dim {} not divisible by vision_heads {}",
                self.vision_dim, self.vision_heads
            )));
        }
        Ok(())
    }
}

/// Which cross-modal projections are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    Bidirectional,
    TextToVision,
    VisionToText,
    /// Both projections masked to zero: text and vision prompts learn independently.
    Independent,
}

impl Coupling {
    pub fn text_to_vision(self) -> bool {
        matches!(self, Coupling::Bidirectional | Coupling::TextToVision)
    }

    pub fn vision_to_text(self) -> bool {
        matches!(self, Coupling::Bidirectional | Coupling::VisionToText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub text_ctx: usize,
    pub vision_ctx: usize,
    /// Number of sub-crops N; the whole image uses view index N + 1.
    pub n_views: usize,
    pub coupling: Coupling,
    /// When false the multi-view signal rows stay frozen at zero.
    pub view_signal: bool,
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self::mvtec()
    }
}

impl PromptConfig {
    pub fn mvtec() -> Self {
        Self {
            text_ctx: 3,
            vision_ctx: 3,
            n_views: 4,
            coupling: Coupling::Bidirectional,
            view_signal: true,
            init_std: 0.02,
        }
    }

    pub fn visa() -> Self {
        Self {
            text_ctx: 5,
            vision_ctx: 8,
            ..Self::mvtec()
        }
    }

    /// Rows of the coupled text block at every prompted layer.
    pub fn text_block_rows(&self) -> usize {
        self.text_ctx + self.vision_ctx
    }

    /// Rows of the coupled vision block, including the view-signal row.
    /// Zero when there are no context vectors at all.
    pub fn vision_block_rows(&self) -> usize {
        if self.text_block_rows() == 0 {
            0
        } else {
            self.vision_ctx + self.text_ctx + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = (self.n_views as f64).sqrt().round() as usize;
        if g * g != self.n_views || g == 0 {
            return Err(Error::config(format!(
                "n_views must be a positive perfect square, got {}",
                self.n_views
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("init_std must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Output map (height, width).
    pub map_size: [usize; 2],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            map_size: [240, 240],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    /// Patch features weighted by the spatially softmaxed abnormal logits.
    #[default]
    LogitWeighted,
    /// Plain mean of patch features.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    /// `None` disables class balancing (alpha_t = 1).
    pub focal_alpha: Option<f64>,
    pub dice_smooth: f64,
    pub align_temperature: f64,
    pub latent_label_smoothing: f64,
    pub align_target: AlignTarget,
    pub use_align: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
            dice_smooth: 1.0,
            align_temperature: 2.0,
            latent_label_smoothing: 0.003,
            align_target: AlignTarget::LogitWeighted,
            use_align: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub pixel: bool,
    pub latent: bool,
    pub latent_mu: f64,
    pub latent_sigma: f64,
    /// Perlin lattice scales are 2^e with e drawn from this inclusive range, per axis.
    pub perlin_scale_exp: [u32; 2],
    pub perlin_threshold: f64,
    pub beta_range: [f64; 2],
    pub max_area_fraction: f64,
    pub max_retries: usize,
    pub texture_dir: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pixel: true,
            latent: true,
            latent_mu: 0.0,
            latent_sigma: 0.015,
            perlin_scale_exp: [0, 5],
            perlin_threshold: 0.5,
            beta_range: [0.2, 1.0],
            max_area_fraction: 0.5,
            max_retries: 64,
            texture_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub decoder_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up from zero, measured in epochs.
    pub warmup_epochs: usize,
    /// Fresh anomaly draws per reference shot within one epoch.
    pub iterations_per_shot: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 1,
            prompt_lr: 0.001,
            decoder_lr: 0.0002,
            momentum: 0.9,
            weight_decay: 1e-5,
            warmup_epochs: 1,
            iterations_per_shot: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub enabled: bool,
    /// 1-based vision layer indices averaged into the bank features.
    pub layers: Vec<usize>,
    /// Build the bank with trained prompts active (false: plain backbone).
    pub prompted: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self::mvtec()
    }
}

impl MemoryConfig {
    pub fn mvtec() -> Self {
        Self {
            enabled: true,
            layers: vec![7, 8, 9, 10],
            prompted: true,
        }
    }

    pub fn visa() -> Self {
        Self {
            layers: vec![7, 8, 9],
            ..Self::mvtec()
        }
    }
}

/// Where the frozen encoder comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// Random weights drawn from `seed`.
    Tiny { seed: u64, config: BackboneConfig },
    /// OpenCLIP-named safetensors weights plus the BPE merges file.
    Pretrained {
        weights: PathBuf,
        bpe_vocab: PathBuf,
        config: BackboneConfig,
    },
}

impl BackboneSpec {
    pub fn config(&self) -> &BackboneConfig {
        match self {
            BackboneSpec::Tiny { config, .. } | BackboneSpec::Pretrained { config, .. } => config,
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Tiny {
            seed: 0,
            config: BackboneConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub name: Option<String>,
    /// Restrict to these categories; all discovered categories when empty.
    pub categories: Vec<String>,
}

/// Full description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub backbone: BackboneSpec,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    /// One prompt stack and decoder per category.
    pub per_class: bool,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Test images per forward batch at evaluation time.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            k: 1,
            seeds: vec![0, 1, 2, 3, 4],
            backbone: BackboneSpec::default(),
            prompt: PromptConfig::mvtec(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            memory: MemoryConfig::mvtec(),
            per_class: false,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs"),
            eval_batch: 8,
        }
    }
}

impl RunConfig {
    /// Reference MVTec-AD setup on a pretrained ViT-B/16+ backbone.
    pub fn mvtec(weights: PathBuf, bpe_vocab: PathBuf) -> Self {
        Self {
            backbone: BackboneSpec::Pretrained {
                weights,
                bpe_vocab,
                config: BackboneConfig::vit_b16_plus(),
            },
            dataset: DatasetConfig {
                name: Some("mvtec".into()),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Reference VisA setup on a pretrained ViT-B/16+ backbone.
    pub fn visa(weights: PathBuf, bpe_vocab: PathBuf) -> Self {
        Self {
            prompt: PromptConfig::visa(),
            memory: MemoryConfig::visa(),
            dataset: DatasetConfig {
                name: Some("visa".into()),
                ..Default::default()
            },
            ..Self::mvtec(weights, bpe_vocab)
        }
    }

    /// Desk-scale setup on the tiny random backbone.
    pub fn tiny() -> Self {
        let backbone = BackboneConfig::tiny();
        Self {
            memory: MemoryConfig {
                enabled: true,
                layers: vec![2, 3],
                prompted: true,
            },
            decoder: DecoderConfig {
                hidden: 32,
                map_size: [30, 30],
            },
            backbone: BackboneSpec::Tiny {
                seed: 0,
                config: backbone,
            },
            // A random backbone needs far larger steps than the pretrained
            // one; above about 0.05 the decoder collapses to a constant map.
            train: TrainConfig {
                epochs: 10,
                iterations_per_shot: 15,
                prompt_lr: 0.002,
                decoder_lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone.config();
        bb.validate()?;
        self.prompt.validate()?;
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.train.batch_size != 1 {
            return Err(Error::config("only batch_size = 1 is supported"));
        }
        if self.decoder.map_size.iter().any(|&s| s == 0) || self.decoder.hidden == 0 {
            return Err(Error::config("decoder map_size and hidden must be nonzero"));
        }
        if self.memory.enabled {
            if self.memory.layers.is_empty() {
                return Err(Error::config("memory.layers must not be empty"));
            }
            if let Some(&bad) = self
                .memory
                .layers
                .iter()
                .find(|&&l| l == 0 || l > bb.vision_layers)
            {
                return Err(Error::config(format!(
                    "memory layer {bad} outside [1, {}]",
                    bb.vision_layers
                )));
            }
        }
        let [lo, hi] = self.synth.beta_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::config(
                "synth.beta_range must satisfy 0 <= lo <= hi <= 1",
            ));
        }
        if !(self.synth.latent_sigma >= 0.0) {
            return Err(Error::config("synth.latent_sigma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.loss.latent_label_smoothing) {
            return Err(Error::config(
                "loss.latent_label_smoothing must be in [0, 1)",
            ));
        }
        if self.loss.align_temperature <= 0.0 {
            return Err(Error::config("loss.align_temperature must be > 0"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
