//! k-shot episodes: sample shots, train, build the memory, score the test
//! split and report image and pooled pixel AUROC per category.

mod metrics;

pub use metrics::{auroc, mean_std, pixel_auroc};

use std::io::Write;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ClipBackbone;
use crate::config::RunConfig;
use crate::dataset::{load_mask, load_rgb, Category, TestSample};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::AnoPle;
use crate::scoring::harmonic;
use crate::synth::TextureSource;
use crate::train::{train, TrainReport};
use crate::views::{images_to_tensor, make_views, mask_to_bools, ViewMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    /// Scores from the prompted encoders and decoder alone, without memory.
    pub prompt_only_image_auroc: f64,
    pub prompt_only_pixel_auroc: f64,
}

/// One scored test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub category: String,
    pub label: bool,
    pub score: f64,
    pub p_hat: f64,
    pub map_max: f64,
    pub prompt_only_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub k: usize,
    pub seed: u64,
    pub categories: Vec<String>,
    /// Means over categories.
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub prompt_only_image_auroc: f64,
    pub prompt_only_pixel_auroc: f64,
    pub per_class: Vec<ClassResult>,
}

/// A trained prompt stack and decoder with the categories it serves.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: AnoPle,
    pub categories: Vec<String>,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct TrainedEpisode {
    pub seed: u64,
    pub models: Vec<TrainedModel>,
    /// Reference shots per category, in category order.
    pub shots: Vec<(String, Vec<RgbImage>)>,
}

impl TrainedEpisode {
    pub fn model_for(&self, category: &str) -> Result<&AnoPle> {
        self.models
            .iter()
            .find(|m| m.categories.iter().any(|c| c == category))
            .map(|m| &m.model)
            .ok_or_else(|| Error::State(format!("no model trained for {category}")))
    }

    pub fn shots_for(&self, category: &str) -> Result<&[RgbImage]> {
        self.shots
            .iter()
            .find(|(c, _)| c == category)
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| Error::State(format!("no shots for {category}")))
    }
}

pub fn load_shots(category: &Category, k: usize, seed: u64) -> Result<Vec<RgbImage>> {
    category
        .sample_shots(k, seed)?
        .iter()
        .map(|p| load_rgb(p))
        .collect()
}

fn build_backbone_model(
    backbone: &ClipBackbone,
    config: &RunConfig,
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<AnoPle> {
    AnoPle::new(backbone.clone(), config, classes, rng)
}

/// Samples shots and trains one shared model, or one per category when
/// `config.per_class` is set.
pub fn train_episode(
    config: &RunConfig,
    seed: u64,
    categories: &[Category],
    backbone: &ClipBackbone,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainedEpisode> {
    config.validate()?;
    if categories.is_empty() {
        return Err(Error::config("no categories to train on"));
    }
    let textures = TextureSource::from_config(&config.synth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shots = categories
        .iter()
        .map(|c| Ok((c.name.clone(), load_shots(c, config.k, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::new();
    let groups: Vec<Vec<usize>> = if config.per_class {
        (0..categories.len()).map(|i| vec![i]).collect()
    } else {
        vec![(0..categories.len()).collect()]
    };
    for group in groups {
        let names: Vec<String> = group.iter().map(|&i| categories[i].name.clone()).collect();
        let model = build_backbone_model(backbone, config, &names, &mut rng)?;
        let images: Vec<RgbImage> = group
            .iter()
            .flat_map(|&i| shots[i].1.iter().cloned())
            .collect();
        log::info!("training on {} shots of {:?}", images.len(), names);
        let report = train(
            &model,
            &images,
            &config.train,
            &config.synth,
            &textures,
            &mut rng,
            metrics.as_mut().map(|w| &mut **w as &mut dyn Write),
        )?;
        models.push(TrainedModel {
            model,
            categories: names,
            report,
        });
    }
    Ok(TrainedEpisode {
        seed,
        models,
        shots,
    })
}

/// Whole-view tensors for a batch of test images.
fn test_batch(model: &AnoPle, samples: &[&TestSample]) -> Result<candle_core::Tensor> {
    let res = model.backbone.config().input_resolution as u32;
    let n = model.prompts.n_views();
    let wholes = samples
        .iter()
        .map(|s| {
            let img = load_rgb(&s.path)?;
            Ok(make_views(
                s.path.display().to_string(),
                &img,
                None,
                ViewMode::Test,
                n,
                res,
            )?
            .whole()
            .image
            .clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RgbImage> = wholes.iter().collect();
    images_to_tensor(&refs, model.dtype())
}

/// Scores one category's test split.
pub fn evaluate_category(
    model: &AnoPle,
    category: &Category,
    bank: Option<&MemoryBank>,
    config: &RunConfig,
) -> Result<(ClassResult, Vec<ScoreRecord>)> {
    let text = model.text_features()?;
    let (h, w) = model.decoder.map_size();
    let mut records = Vec::with_capacity(category.test.len());
    let mut fused_maps: Vec<Vec<f32>> = Vec::new();
    let mut decoder_maps: Vec<Vec<f32>> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let batch = config.eval_batch.max(1);
    let samples: Vec<&TestSample> = category.test.iter().collect();
    for chunk in samples.chunks(batch) {
        let pixels = test_batch(model, chunk)?;
        let preds = model.predict(&pixels, &text, bank.map(|b| (b, config.memory.prompted)))?;
        for (s, p) in chunk.iter().zip(preds) {
            let mask = match &s.mask {
                Some(path) => mask_to_bools(&load_mask(path)?, h as u32, w as u32),
                None => vec![false; h * w],
            };
            records.push(ScoreRecord {
                image_id: s.id(&category.name),
                category: category.name.clone(),
                label: s.is_anomalous(),
                score: p.score,
                p_hat: p.p_hat,
                map_max: p.map.max() as f64,
                prompt_only_score: harmonic(p.p_hat, p.decoder_map.max() as f64),
            });
            fused_maps.push(p.map.values);
            decoder_maps.push(p.decoder_map.values);
            masks.push(mask);
        }
    }
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let prompt_scores: Vec<f64> = records.iter().map(|r| r.prompt_only_score).collect();
    let mask_refs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
    let fused_refs: Vec<&[f32]> = fused_maps.iter().map(Vec::as_slice).collect();
    let dec_refs: Vec<&[f32]> = decoder_maps.iter().map(Vec::as_slice).collect();
    let result = ClassResult {
        category: category.name.clone(),
        image_auroc: auroc(&scores, &labels)?,
        pixel_auroc: pixel_auroc(&fused_refs, &mask_refs)?,
        prompt_only_image_auroc: auroc(&prompt_scores, &labels)?,
        prompt_only_pixel_auroc: pixel_auroc(&dec_refs, &mask_refs)?,
    };
    Ok((result, records))
}

/// Evaluates every category with its trained model and a memory built from its shots.
pub fn evaluate_episode(
    trained: &TrainedEpisode,
    categories: &[Category],
    config: &RunConfig,
) -> Result<(EvalRun, Vec<ScoreRecord>)> {
    let mut per_class = Vec::with_capacity(categories.len());
    let mut all = Vec::new();
    for cat in categories {
        let model = trained.model_for(&cat.name)?;
        let bank = if config.memory.enabled {
            let shots: Vec<&RgbImage> = trained.shots_for(&cat.name)?.iter().collect();
            Some(model.build_memory(&shots, &config.memory.layers, config.memory.prompted)?)
        } else {
            None
        };
        let (res, recs) = evaluate_category(model, cat, bank.as_ref(), config)?;
        log::info!(
            "{}: image AUROC {:.4}, pixel AUROC {:.4}",
            cat.name,
            res.image_auroc,
            res.pixel_auroc
        );
        per_class.push(res);
        all.extend(recs);
    }
    let mean = |f: fn(&ClassResult) -> f64| {
        per_class.iter().map(f).sum::<f64>() / per_class.len().max(1) as f64
    };
    let run = EvalRun {
        k: config.k,
        seed: trained.seed,
        categories: categories.iter().map(|c| c.name.clone()).collect(),
        image_auroc: mean(|r| r.image_auroc),
        pixel_auroc: mean(|r| r.pixel_auroc),
        prompt_only_image_auroc: mean(|r| r.prompt_only_image_auroc),
        prompt_only_pixel_auroc: mean(|r| r.prompt_only_pixel_auroc),
        per_class,
    };
    Ok((run, all))
}

/// Train and evaluate one seed.
pub fn run_episode(
    config: &RunConfig,
    seed: u64,
    categories: &[Category],
    backbone: &ClipBackbone,
) -> Result<(EvalRun, Vec<ScoreRecord>)> {
    let trained = train_episode(config, seed, categories, backbone, None)?;
    evaluate_episode(&trained, categories, config)
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub image_auroc: (f64, f64),
    pub pixel_auroc: (f64, f64),
    pub prompt_only_image_auroc: (f64, f64),
    pub prompt_only_pixel_auroc: (f64, f64),
}

pub fn summarize(runs: &[EvalRun]) -> SeedSummary {
    let col = |f: fn(&EvalRun) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    SeedSummary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        image_auroc: col(|r| r.image_auroc),
        pixel_auroc: col(|r| r.pixel_auroc),
        prompt_only_image_auroc: col(|r| r.prompt_only_image_auroc),
        prompt_only_pixel_auroc: col(|r| r.prompt_only_pixel_auroc),
    }
}
