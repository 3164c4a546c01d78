//! Frozen CLIP-style dual encoder with layer-wise prompt injection.
//!
//! Both towers accept a [`PromptHook`]. Before transformer block `j` the hook
//! may return a block of prompt tokens; the first such block is inserted right
//! after the leading special token (`[CLS]` / start-of-text), and every later
//! block replaces the slot outputs of the previous layer. Layers for which the
//! hook returns `None` let the slots propagate untouched.

pub mod tokenizer;

mod layers;
mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{BackboneConfig, BackboneSpec};
use crate::error::{Error, Result};
pub(crate) use layers::{l2_normalize, softmax_last_dim};
use layers::{Block, LayerNorm};
pub use tokenizer::{BpeTokenizer, Tokenizer};

/// Supplies prompt tokens to the encoder towers, layer by layer.
pub trait PromptHook {
    /// Block of shape `[S, text_dim]` to inject before text layer `layer` (0-based).
    fn text_block(&self, layer: usize) -> Result<Option<Tensor>>;

    /// Block of shape `[B, S, vision_dim]` for a batch whose items carry the
    /// given 1-based view indices.
    fn vision_block(&self, layer: usize, views: &[usize]) -> Result<Option<Tensor>>;
}

/// The plain, unprompted backbone.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPrompts;

impl PromptHook for NoPrompts {
    fn text_block(&self, _layer: usize) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn vision_block(&self, _layer: usize, _views: &[usize]) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
struct VisionTower {
    conv1: Tensor,
    class_embedding: Tensor,
    positional_embedding: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Tensor,
}

#[derive(Debug, Clone)]
struct TextTower {
    token_embedding: Tensor,
    positional_embedding: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    text_projection: Tensor,
}

/// Output of one prompted vision forward pass.
#[derive(Debug, Clone)]
pub struct VisionOutput {
    /// `[B, embed_dim]`, projected into the shared space and L2-normalized.
    pub cls: Tensor,
    /// `[B, n_patches, vision_dim]` final-layer patch tokens (after `ln_post`),
    /// prompt slots removed.
    pub patches: Tensor,
    /// Raw residual-stream patch tokens `[B, n_patches, vision_dim]` at each
    /// requested 1-based layer, in request order.
    pub captured: Vec<Tensor>,
}

/// Frozen dual encoder. Forward passes only read the weights.
#[derive(Debug, Clone)]
pub struct ClipBackbone {
    config: BackboneConfig,
    tokenizer: Tokenizer,
    weights: BTreeMap<String, Tensor>,
    vision: VisionTower,
    text: TextTower,
    logit_scale: f64,
    dtype: DType,
}

fn insert_or_replace(x: &Tensor, block: &Tensor, slots: usize) -> Result<Tensor> {
    let t = x.dim(1)?;
    let head = x.narrow(1, 0, 1)?;
    let tail = x.narrow(1, 1 + slots, t - 1 - slots)?;
    Ok(Tensor::cat(&[&head, block, &tail], 1)?)
}

fn check_block(block: &Tensor, slots: usize, width: usize, what: &str) -> Result<usize> {
    let dims = block.dims();
    let (rows, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if w != width {
        return Err(Error::config(format!(
            "{what} prompt width {w} does not match encoder width {width}"
        )));
    }
    if slots != 0 && rows != slots {
        return Err(Error::shape(format!(
            "{what} prompt block has {rows} rows but {slots} slots are in use"
        )));
    }
    Ok(rows)
}

impl ClipBackbone {
    /// Random weights drawn deterministically from `seed`.
    pub fn tiny(config: &BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::builtin();
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::config(format!(
                "tiny backbone vocab_size must be {}, got {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let weights = weights::random_init(config, seed, dtype)?;
        Self::from_weights(config.clone(), tokenizer, weights, dtype)
    }

    /// Random or pretrained, as the run configuration describes.
    pub fn from_spec(spec: &BackboneSpec, dtype: DType) -> Result<Self> {
        match spec {
            BackboneSpec::Tiny { seed, config } => Self::tiny(config, *seed, dtype),
            BackboneSpec::Pretrained {
                weights,
                bpe_vocab,
                config,
            } => Self::load(
                config,
                weights,
                Tokenizer::Bpe(BpeTokenizer::from_file(bpe_vocab)?),
                dtype,
            ),
        }
    }

    /// Loads OpenCLIP-named safetensors weights.
    pub fn load(
        config: &BackboneConfig,
        weights_path: &Path,
        tokenizer: Tokenizer,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let raw = candle_core::safetensors::load(weights_path, &Device::Cpu)?;
        let mut weights = BTreeMap::new();
        for (name, t) in raw {
            weights.insert(name, t.to_dtype(dtype)?);
        }
        weights::check_shapes(config, &weights)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::config(format!(
                "tokenizer has {} entries but config vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        Self::from_weights(config.clone(), tokenizer, weights, dtype)
    }

    /// Writes the weights under their OpenCLIP names.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = safetensors::serialize(self.weights.iter(), None)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn from_weights(
        config: BackboneConfig,
        tokenizer: Tokenizer,
        weights: BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        weights::check_shapes(&config, &weights)?;
        let vision = weights::vision_tower(&config, &weights)?;
        let text = weights::text_tower(&config, &weights)?;
        let logit_scale = weights["logit_scale"]
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?[0]
            .exp();
        Ok(Self {
            config,
            tokenizer,
            weights,
            vision,
            text,
            logit_scale,
            dtype,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    /// Inverse temperature applied to cosine similarities (`1 / tau`).
    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// SHA-256 over every frozen weight, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in flat {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Plain text embedding, no prompts.
    pub fn encode_text(&self, token_ids: &[Vec<u32>]) -> Result<Tensor> {
        self.encode_text_with_prompts(token_ids, &NoPrompts)
    }

    /// End-of-text features `[B, embed_dim]`, L2-normalized.
    pub fn encode_text_with_prompts(
        &self,
        token_ids: &[Vec<u32>],
        hook: &dyn PromptHook,
    ) -> Result<Tensor> {
        if token_ids.is_empty() {
            return Err(Error::input("no text sequences to encode"));
        }
        let dev = self.device();
        let d = self.config.text_dim;
        let b = token_ids.len();
        let max_len = token_ids.iter().map(Vec::len).max().unwrap_or(0);
        if token_ids.iter().any(|s| s.len() < 2) {
            return Err(Error::input(
                "token sequence must hold start and end markers",
            ));
        }
        // Padding follows the end token; the causal mask keeps it out of the
        // end-token feature.
        let mut rows = Vec::with_capacity(b);
        for ids in token_ids {
            let idx = Tensor::new(ids.as_slice(), dev)?;
            let emb = self.text.token_embedding.index_select(&idx, 0)?;
            let emb = if ids.len() < max_len {
                emb.pad_with_zeros(0, 0, max_len - ids.len())?
            } else {
                emb
            };
            rows.push(emb);
        }
        let mut x = Tensor::stack(&rows, 0)?;
        let mut slots = 0usize;
        if let Some(block) = hook.text_block(0)? {
            let s = check_block(&block, 0, d, "text")?;
            if s > 0 {
                let block = block.unsqueeze(0)?.broadcast_as((b, s, d))?;
                x = insert_or_replace(&x, &block, 0)?;
                slots = s;
            }
        }
        let t = x.dim(1)?;
        if t > self.config.context_length {
            return Err(Error::shape(format!(
                "text sequence of {t} tokens exceeds context length {}",
                self.config.context_length
            )));
        }
        let pos = self.text.positional_embedding.narrow(0, 0, t)?;
        x = x.broadcast_add(&pos)?;
        let mask = causal_mask(t, self.dtype)?;
        for (j, blk) in self.text.blocks.iter().enumerate() {
            if j > 0 && slots > 0 {
                if let Some(block) = hook.text_block(j)? {
                    check_block(&block, slots, d, "text")?;
                    let block = block.unsqueeze(0)?.broadcast_as((b, slots, d))?;
                    x = insert_or_replace(&x, &block, slots)?;
                }
            }
            x = blk.forward(&x, Some(&mask))?;
        }
        let eot: Vec<u32> = token_ids
            .iter()
            .enumerate()
            .map(|(i, ids)| (i * t + slots + ids.len() - 1) as u32)
            .collect();
        let eot = Tensor::new(eot.as_slice(), dev)?;
        let feats = x.reshape((b * t, d))?.index_select(&eot, 0)?;
        let feats = self.text.ln_final.forward(&feats)?;
        l2_normalize(&feats.matmul(&self.text.text_projection)?)
    }

    /// Plain image embedding, no prompts.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<VisionOutput> {
        let b = pixels.dim(0)?;
        let views = vec![1; b];
        self.encode_image_with_prompts(pixels, &NoPrompts, &views, &[])
    }

    /// Prompted vision forward. `pixels` is `[B, 3, R, R]`, normalized;
    /// `views[i]` is the 1-based view index of item `i`; `capture` lists
    /// 1-based layers whose patch tokens are returned in `captured`.
    pub fn encode_image_with_prompts(
        &self,
        pixels: &Tensor,
        hook: &dyn PromptHook,
        views: &[usize],
        capture: &[usize],
    ) -> Result<VisionOutput> {
        let cfg = &self.config;
        let (b, c, h, w) = pixels.dims4()?;
        let r = cfg.input_resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape(format!(
                "expected pixels [B, 3, {r}, {r}], got [{b}, {c}, {h}, {w}]"
            )));
        }
        if views.len() != b {
            return Err(Error::input(format!(
                "{} view indices for a batch of {b}",
                views.len()
            )));
        }
        if let Some(&bad) = capture.iter().find(|&&l| l == 0 || l > cfg.vision_layers) {
            return Err(Error::input(format!(
                "layer {bad} outside [1, {}]",
                cfg.vision_layers
            )));
        }
        let d = cfg.vision_dim;
        let p = cfg.patch_size;
        let (gh, gw) = cfg.patch_grid();
        let n = gh * gw;
        let pixels = pixels.to_dtype(self.dtype)?;
        let patches = pixels
            .reshape((b, 3, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b * n, 3 * p * p))?;
        let kernel = self.vision.conv1.reshape((d, 3 * p * p))?;
        let tokens = patches.matmul(&kernel.t()?)?.reshape((b, n, d))?;
        let cls = self
            .vision
            .class_embedding
            .reshape((1, 1, d))?
            .broadcast_as((b, 1, d))?;
        let mut x =
            Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.vision.positional_embedding)?;
        let mut slots = 0usize;
        if let Some(block) = hook.vision_block(0, views)? {
            let s = check_block(&block, 0, d, "vision")?;
            if s > 0 {
                x = insert_or_replace(&x, &block, 0)?;
                slots = s;
            }
        }
        x = self.vision.ln_pre.forward(&x)?;
        let mut captured = vec![None; capture.len()];
        for (j, blk) in self.vision.blocks.iter().enumerate() {
            if j > 0 && slots > 0 {
                if let Some(block) = hook.vision_block(j, views)? {
                    check_block(&block, slots, d, "vision")?;
                    x = insert_or_replace(&x, &block, slots)?;
                }
            }
            x = blk.forward(&x, None)?;
            for (k, &layer) in capture.iter().enumerate() {
                if layer == j + 1 {
                    captured[k] = Some(x.narrow(1, 1 + slots, n)?);
                }
            }
        }
        let cls = self
            .vision
            .ln_post
            .forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let cls = l2_normalize(&cls.matmul(&self.vision.proj)?)?;
        let patches = self.vision.ln_post.forward(&x.narrow(1, 1 + slots, n)?)?;
        Ok(VisionOutput {
            cls,
            patches,
            captured: captured.into_iter().map(|t| t.expect("captured")).collect(),
        })
    }

    /// Patch tokens averaged over `layers` (1-based) and L2-normalized per
    /// location: `[B, grid_h, grid_w, vision_dim]`.
    pub fn extract_intermediate_patches(
        &self,
        pixels: &Tensor,
        layers: &[usize],
        hook: &dyn PromptHook,
        views: &[usize],
    ) -> Result<Tensor> {
        if layers.is_empty() {
            return Err(Error::input("empty layer list"));
        }
        let out = self.encode_image_with_prompts(pixels, hook, views, layers)?;
        average_layers(&out.captured, self.config.patch_grid())
    }
}

/// Mean over per-layer patch tokens, then per-location L2 normalization.
pub(crate) fn average_layers(per_layer: &[Tensor], grid: (usize, usize)) -> Result<Tensor> {
    if per_layer.is_empty() {
        return Err(Error::input("empty layer list"));
    }
    let stacked = Tensor::stack(per_layer, 0)?;
    let mean = stacked.mean(0)?;
    let (b, _, d) = mean.dims3()?;
    l2_normalize(&mean)?
        .reshape((b, grid.0, grid.1, d))
        .map_err(Into::into)
}

fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), &Device::Cpu)?.to_dtype(dtype)?)
}
