//! The assembled detector: frozen backbone, prompt stack and decoder, with
//! the training objective and inference path.

use candle_core::{DType, Tensor, Var};
use image::RgbImage;
use rand::Rng;

use crate::backbone::{average_layers, l2_normalize, ClipBackbone, NoPrompts, PromptHook};
use crate::config::{LossConfig, RunConfig, SynthConfig};
use crate::decoder::{abnormal_probability, pixel_logits, Decoder};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, dice_loss, focal_loss, image_loss, image_probability, FocalParams, Objective,
};
use crate::memory::MemoryBank;
use crate::prompt::{build_text_inputs, PromptStack, TextInputs};
use crate::scoring::{fuse_maps, image_score, AnomalyMap, Provenance};
use crate::synth::{
    simulate_latent_anomaly, simulate_pixel_anomaly, LatentPerturbation, TextureSource,
};
use crate::views::{images_to_tensor, make_views, masks_to_tensor, ViewMode};

/// Normal and abnormal text features, class-averaged and normalized: `[2, e]`
/// with the normal state in row 0.
#[derive(Debug, Clone)]
pub struct TextFeatures(pub Tensor);

/// One optimization step's inputs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `[A, 3, R, R]` views of the simulated anomalies (or of the normal shots
    /// when pixel simulation is disabled).
    pub corrupted: Tensor,
    pub corrupted_views: Vec<usize>,
    /// `[A, h, w]` 0/1 ground truth at decoder resolution.
    pub masks: Tensor,
    /// Row of `corrupted` holding the whole-image view of each shot.
    pub whole_rows: Vec<usize>,
    /// `[B, 3, R, R]` whole-image views of the clean shots.
    pub normal: Tensor,
    /// Whether `corrupted` really holds pixel-space anomalies.
    pub pixel_anomalies: bool,
    /// One latent perturbation per shot, when enabled.
    pub latent: Option<Vec<LatentPerturbation>>,
}

impl TrainBatch {
    /// Simulates anomalies for `shots` and arranges their views.
    pub fn prepare(
        shots: &[&RgbImage],
        model: &AnoPle,
        synth: &SynthConfig,
        textures: &TextureSource,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if shots.is_empty() {
            return Err(Error::input("empty training batch"));
        }
        let n_views = model.prompts.n_views();
        let res = model.backbone.config().input_resolution as u32;
        let (mh, mw) = model.decoder.map_size();
        let dtype = model.dtype;
        let mut view_imgs = Vec::new();
        let mut view_masks = Vec::new();
        let mut views = Vec::new();
        let mut whole_rows = Vec::new();
        let mut normal_imgs = Vec::new();
        for (i, shot) in shots.iter().enumerate() {
            let clean = make_views(format!("shot{i}"), shot, None, ViewMode::Test, n_views, res)?;
            normal_imgs.push(clean.whole().image.clone());
            let batch = if synth.pixel {
                let a = simulate_pixel_anomaly(shot, textures, synth, rng)?;
                make_views(
                    "anomaly",
                    &a.image,
                    Some(&a.mask),
                    ViewMode::Train,
                    n_views,
                    res,
                )?
            } else {
                make_views("clean", shot, None, ViewMode::Train, n_views, res)?
            };
            for v in batch.views {
                if v.index == n_views + 1 {
                    whole_rows.push(views.len());
                }
                views.push(v.index);
                view_imgs.push(v.image);
                view_masks.push(v.mask);
            }
        }
        let img_refs: Vec<&RgbImage> = view_imgs.iter().collect();
        let mask_refs: Vec<_> = view_masks.iter().map(|m| m.as_ref()).collect();
        let normal_refs: Vec<&RgbImage> = normal_imgs.iter().collect();
        let latent = if synth.latent {
            let e = model.backbone.config().embed_dim;
            Some(
                (0..shots.len())
                    .map(|_| {
                        LatentPerturbation::sample(e, synth.latent_mu, synth.latent_sigma, rng)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            corrupted: images_to_tensor(&img_refs, dtype)?,
            corrupted_views: views,
            masks: masks_to_tensor(&mask_refs, mh, mw, dtype)?,
            whole_rows,
            normal: images_to_tensor(&normal_refs, dtype)?,
            pixel_anomalies: synth.pixel,
            latent,
        })
    }
}

/// Differentiable loss terms of one batch, before summation.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub dice: Tensor,
    pub focal: Tensor,
    pub img: Tensor,
    pub align: Tensor,
}

impl LossTerms {
    pub fn into_objective(self) -> Result<Objective> {
        Objective::combine((self.dice + self.focal)?, self.img, self.align)
    }
}

/// Dense and global outputs for one query image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub p_hat: f64,
    pub decoder_map: AnomalyMap,
    pub memory_map: Option<AnomalyMap>,
    /// Fused map, or the decoder map when no memory is used.
    pub map: AnomalyMap,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AnoPle {
    pub backbone: ClipBackbone,
    pub prompts: PromptStack,
    pub decoder: Decoder,
    pub text: TextInputs,
    pub loss: LossConfig,
    dtype: DType,
}

impl AnoPle {
    /// Fresh prompts and decoder drawn from `rng`.
    pub fn new(
        backbone: ClipBackbone,
        config: &RunConfig,
        classes: &[String],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dtype = backbone.dtype();
        let bcfg = backbone.config().clone();
        let prompts = PromptStack::new(&config.prompt, &bcfg, rng, dtype)?;
        let decoder = Decoder::new(
            &config.decoder,
            bcfg.vision_dim,
            bcfg.embed_dim,
            bcfg.patch_grid(),
            rng,
            dtype,
        )?;
        let text = build_text_inputs(&backbone, classes)?;
        Ok(Self {
            backbone,
            prompts,
            decoder,
            text,
            loss: config.loss.clone(),
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn classes(&self) -> &[String] {
        &self.text.classes
    }

    /// Prompt parameters first, then decoder parameters.
    pub fn parameter_groups(&self) -> (Vec<Var>, Vec<Var>) {
        (self.prompts.trainable(), self.decoder.trainable())
    }

    pub fn named_tensors(&self) -> Vec<(String, Var)> {
        let mut out = self.prompts.named_tensors();
        out.extend(self.decoder.named_tensors());
        out
    }

    pub fn text_features(&self) -> Result<TextFeatures> {
        let hook: &dyn PromptHook = &self.prompts;
        let mean_state = |ids: &[Vec<u32>]| -> Result<Tensor> {
            let f = self.backbone.encode_text_with_prompts(ids, hook)?;
            l2_normalize(&f.mean_keepdim(0)?)
        };
        let normal = mean_state(&self.text.normal)?;
        let abnormal = mean_state(&self.text.abnormal)?;
        Ok(TextFeatures(Tensor::cat(&[&normal, &abnormal], 0)?))
    }

    fn scale(&self) -> f64 {
        self.backbone.logit_scale()
    }

    /// The total objective for one batch.
    pub fn objective(&self, batch: &TrainBatch) -> Result<Objective> {
        self.loss_terms(batch)?.into_objective()
    }

    pub fn loss_terms(&self, batch: &TrainBatch) -> Result<LossTerms> {
        let text = self.text_features()?.0;
        let scale = self.scale();
        let corrupted = self.backbone.encode_image_with_prompts(
            &batch.corrupted,
            &self.prompts,
            &batch.corrupted_views,
            &[],
        )?;
        let whole = self.prompts.whole_view();
        let normal_views = vec![whole; batch.normal.dim(0)?];
        let normal = self.backbone.encode_image_with_prompts(
            &batch.normal,
            &self.prompts,
            &normal_views,
            &[],
        )?;

        let field = self.decoder.decode(&corrupted.patches)?;
        let logits = pixel_logits(&field, &text)?;
        let prob = abnormal_probability(&logits, scale)?;
        let focal = FocalParams::from(&self.loss);
        let dice = dice_loss(&prob, &batch.masks, self.loss.dice_smooth)?;
        let focal = focal_loss(&prob, &batch.masks, focal)?;

        let rows = Tensor::new(
            batch
                .whole_rows
                .iter()
                .map(|&r| r as u32)
                .collect::<Vec<_>>()
                .as_slice(),
            self.backbone.device(),
        )?;
        let z_pixel = corrupted.cls.index_select(&rows, 0)?;
        let z_latent = match &batch.latent {
            Some(noise) => {
                let rows = noise
                    .iter()
                    .enumerate()
                    .map(|(i, n)| simulate_latent_anomaly(&normal.cls.narrow(0, i, 1)?, n))
                    .collect::<Result<Vec<_>>>()?;
                Some(l2_normalize(&Tensor::cat(&rows, 0)?)?)
            }
            None => None,
        };
        let l_img = image_loss(
            &normal.cls,
            batch.pixel_anomalies.then_some(&z_pixel),
            z_latent.as_ref(),
            &text,
            scale,
            self.loss.latent_label_smoothing,
        )?;

        let l_align = if self.loss.use_align {
            let whole_field = field.index_select(&rows, 0)?;
            let (b, _, h, w) = whole_field.dims4()?;
            let abnormal = logits
                .index_select(&rows, 0)?
                .narrow(1, 1, 1)?
                .reshape((b, h, w))?;
            alignment_loss(
                &abnormal,
                &whole_field,
                &z_pixel,
                self.loss.align_temperature,
                self.loss.align_target,
            )?
        } else {
            dice.zeros_like()?
        };
        Ok(LossTerms {
            dice,
            focal,
            img: l_img,
            align: l_align,
        })
    }

    /// Builds the memory bank from reference images, seen as whole views.
    pub fn build_memory(
        &self,
        shots: &[&RgbImage],
        layers: &[usize],
        prompted: bool,
    ) -> Result<MemoryBank> {
        let res = self.backbone.config().input_resolution as u32;
        let n = self.prompts.n_views();
        let wholes = shots
            .iter()
            .map(|s| {
                Ok(make_views("ref", s, None, ViewMode::Test, n, res)?
                    .whole()
                    .image
                    .clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RgbImage> = wholes.iter().collect();
        let pixels = images_to_tensor(&refs, self.dtype)?;
        let hook: &dyn PromptHook = if prompted { &self.prompts } else { &NoPrompts };
        MemoryBank::build(
            &self.backbone,
            hook,
            &pixels,
            layers,
            self.prompts.whole_view(),
        )
    }

    /// Scores a batch of test images (`[B, 3, R, R]`, whole view).
    /// With `memory`, the decoder map is fused with the memory map; the bank's
    /// layer list selects the captured layers.
    pub fn predict(
        &self,
        pixels: &Tensor,
        text: &TextFeatures,
        memory: Option<(&MemoryBank, bool)>,
    ) -> Result<Vec<Prediction>> {
        let b = pixels.dim(0)?;
        let whole = vec![self.prompts.whole_view(); b];
        let layers: Vec<usize> = memory.map(|(m, _)| m.layers().to_vec()).unwrap_or_default();
        let prompted_bank = memory.map(|(_, p)| p).unwrap_or(true);
        let out =
            self.backbone
                .encode_image_with_prompts(pixels, &self.prompts, &whole, &layers)?;
        let p_hat = image_probability(&out.cls, &text.0, self.scale())?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        let field = self.decoder.decode(&out.patches)?;
        let prob = abnormal_probability(&pixel_logits(&field, &text.0)?, self.scale())?
            .to_dtype(DType::F32)?;
        let (h, w) = self.decoder.map_size();
        let grid = self.backbone.config().patch_grid();

        let mem_values = match memory {
            Some((bank, _)) => {
                let feats = if prompted_bank {
                    average_layers(&out.captured, grid)?
                } else {
                    self.backbone.extract_intermediate_patches(
                        pixels,
                        bank.layers(),
                        &NoPrompts,
                        &whole,
                    )?
                };
                Some(bank.query(&feats)?)
            }
            None => None,
        };

        let mut preds = Vec::with_capacity(b);
        let per = grid.0 * grid.1;
        for i in 0..b {
            let values = prob.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            let decoder_map = AnomalyMap::new(h, w, values, Provenance::Decoder)?;
            let memory_map = match &mem_values {
                Some(v) => Some(
                    AnomalyMap::new(
                        grid.0,
                        grid.1,
                        v[i * per..(i + 1) * per].to_vec(),
                        Provenance::Memory,
                    )?
                    .resized(h, w),
                ),
                None => None,
            };
            let map = match &memory_map {
                Some(m) => fuse_maps(&decoder_map, m)?,
                None => decoder_map.clone(),
            };
            let score = image_score(p_hat[i], &map)?;
            preds.push(Prediction {
                p_hat: p_hat[i],
                decoder_map,
                memory_map,
                map,
                score,
            });
        }
        Ok(preds)
    }
}
