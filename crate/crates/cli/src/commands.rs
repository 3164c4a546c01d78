use std::path::{Path, PathBuf};

use anople_core::checkpoint::{self, CheckpointMeta};
use anople_core::eval::{self, summarize, TrainedEpisode, TrainedModel};
use anople_core::train::{open_metrics, TrainReport};
use anople_core::views::{images_to_tensor, make_views, ViewMode};
use anople_core::{dataset, synthetic, ClipBackbone, RunConfig};
use image::RgbImage;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::options::{EvalArgs, PredictArgs, SynthArgs, TrainArgs};
use crate::run::{run_dir, write_csv, write_heatmap, write_json, Checkpoint, Manifest};

fn categories(cfg: &RunConfig) -> CliResult<Vec<dataset::Category>> {
    let root = cfg.dataset.root.as_ref().ok_or_else(|| {
        CliError::Usage("no dataset root: pass --data or set ANOPLE_DATA_ROOT".into())
    })?;
    Ok(dataset::discover(root, &cfg.dataset.categories)?)
}

fn backbone(cfg: &RunConfig) -> CliResult<ClipBackbone> {
    Ok(ClipBackbone::from_spec(
        &cfg.backbone,
        cfg.precision.dtype(),
    )?)
}

fn manifest(
    command: &str,
    cfg: &RunConfig,
    seeds: Vec<u64>,
    backbone: &ClipBackbone,
    cats: &[dataset::Category],
) -> CliResult<Manifest> {
    Ok(Manifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seeds,
        backbone_checksum: backbone.checksum()?,
        categories: cats.iter().map(|c| c.name.clone()).collect(),
        checkpoints: Vec::new(),
        outputs: Vec::new(),
        config: cfg.clone(),
    })
}

pub fn train(args: &TrainArgs) -> CliResult<PathBuf> {
    let cfg = args.config.resolve()?;
    let seed = args.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    let cats = categories(&cfg)?;
    let bb = backbone(&cfg)?;
    let run = run_dir(args.run.as_deref(), &cfg, "train", &[seed])?;
    let mut m = manifest("train", &cfg, vec![seed], &bb, &cats)?;
    let metrics_path = run.join("metrics.jsonl");
    let mut metrics = open_metrics(&metrics_path)?;
    let trained = eval::train_episode(&cfg, seed, &cats, &bb, Some(&mut metrics))?;
    std::fs::create_dir_all(run.join("checkpoints")).map_err(|e| CliError::io(&run, e))?;
    let mut reports = Vec::new();
    for (i, tm) in trained.models.iter().enumerate() {
        let rel = PathBuf::from(format!("checkpoints/model-{i}.safetensors"));
        let meta = CheckpointMeta {
            config: cfg.clone(),
            classes: tm.model.classes().to_vec(),
            backbone_checksum: m.backbone_checksum.clone(),
            category: cfg.per_class.then(|| tm.categories[0].clone()),
            seed,
        };
        checkpoint::save(&run.join(&rel), &tm.model, &meta)?;
        m.checkpoints.push(Checkpoint {
            path: rel,
            categories: tm.categories.clone(),
        });
        reports.push(&tm.report);
    }
    write_json(&run.join("train_report.json"), &reports)?;
    m.outputs = vec!["metrics.jsonl".into(), "train_report.json".into()];
    m.write(&run)?;
    log::info!("wrote {}", run.display());
    Ok(run)
}

/// Checkpoints of a training run plus freshly loaded shots of the same seed.
/// `data` replaces the dataset root recorded at training time.
fn load_trained(from: &Path, data: Option<&Path>) -> CliResult<(Manifest, TrainedEpisode)> {
    let mut m = Manifest::read(from)?;
    if let Some(d) = data {
        m.config.dataset.root = Some(d.to_path_buf());
    }
    let cfg = &m.config;
    let seed = *m
        .seeds
        .first()
        .ok_or_else(|| CliError::Usage(format!("{} records no seed", from.display())))?;
    let bb = backbone(cfg)?;
    let mut models = Vec::new();
    for c in &m.checkpoints {
        let (model, _) = checkpoint::load_model(&from.join(&c.path), bb.clone())?;
        models.push(TrainedModel {
            model,
            categories: c.categories.clone(),
            report: TrainReport::default(),
        });
    }
    let cats = categories(cfg)?;
    let shots = cats
        .iter()
        .filter(|c| m.categories.contains(&c.name))
        .map(|c| Ok((c.name.clone(), eval::load_shots(c, cfg.k, seed)?)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((
        m,
        TrainedEpisode {
            seed,
            models,
            shots,
        },
    ))
}

#[derive(Serialize)]
struct EvalOutput {
    runs: Vec<anople_core::EvalRun>,
    summary: eval::SeedSummary,
}

// csv cannot serialize flattened structs, so rows spell out their columns.
#[derive(Serialize)]
struct ScoreRow {
    seed: u64,
    image_id: String,
    category: String,
    label: bool,
    score: f64,
    p_hat: f64,
    map_max: f64,
    prompt_only_score: f64,
}

impl ScoreRow {
    fn new(seed: u64, r: anople_core::ScoreRecord) -> Self {
        Self {
            seed,
            image_id: r.image_id,
            category: r.category,
            label: r.label,
            score: r.score,
            p_hat: r.p_hat,
            map_max: r.map_max,
            prompt_only_score: r.prompt_only_score,
        }
    }
}

pub fn evaluate(args: &EvalArgs) -> CliResult<PathBuf> {
    let cfg = args.config.resolve()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let (m, run) = match &args.from {
        Some(from) => {
            let (mut m, trained) = load_trained(from, args.config.data.as_deref())?;
            let cats: Vec<_> = categories(&m.config)?
                .into_iter()
                .filter(|c| m.categories.contains(&c.name))
                .collect();
            let (r, recs) = eval::evaluate_episode(&trained, &cats, &m.config)?;
            rows.extend(recs.into_iter().map(|r| ScoreRow::new(trained.seed, r)));
            runs.push(r);
            m.command = "eval".into();
            m.checkpoints.clear();
            let run = run_dir(args.run.as_deref(), &m.config, "eval", &m.seeds)?;
            (m, run)
        }
        None => {
            let seeds = if args.seeds.is_empty() {
                cfg.seeds.clone()
            } else {
                args.seeds.clone()
            };
            let cats = categories(&cfg)?;
            let bb = backbone(&cfg)?;
            for &s in &seeds {
                let (r, recs) = eval::run_episode(&cfg, s, &cats, &bb)?;
                log::info!(
                    "seed {s}: image AUROC {:.4}, pixel AUROC {:.4}",
                    r.image_auroc,
                    r.pixel_auroc
                );
                rows.extend(recs.into_iter().map(|r| ScoreRow::new(s, r)));
                runs.push(r);
            }
            let run = run_dir(args.run.as_deref(), &cfg, "eval", &seeds)?;
            (manifest("eval", &cfg, seeds, &bb, &cats)?, run)
        }
    };
    let summary = summarize(&runs);
    write_json(
        &run.join("results.json"),
        &EvalOutput {
            runs: runs.clone(),
            summary,
        },
    )?;
    write_csv(&run.join("scores.csv"), &rows)?;
    let per_class: Vec<_> = runs
        .iter()
        .flat_map(|r| r.per_class.iter().map(move |c| (r.seed, c.clone())))
        .map(|(seed, c)| PerClassRow {
            seed,
            category: c.category,
            image_auroc: c.image_auroc,
            pixel_auroc: c.pixel_auroc,
            prompt_only_image_auroc: c.prompt_only_image_auroc,
            prompt_only_pixel_auroc: c.prompt_only_pixel_auroc,
        })
        .collect();
    write_csv(&run.join("per_class.csv"), &per_class)?;
    let mut m = m;
    m.outputs = vec![
        "results.json".into(),
        "scores.csv".into(),
        "per_class.csv".into(),
    ];
    m.write(&run)?;
    for r in &runs {
        println!(
            "seed {}: image AUROC {:.4}, pixel AUROC {:.4}",
            r.seed, r.image_auroc, r.pixel_auroc
        );
    }
    Ok(run)
}

#[derive(Serialize)]
struct PerClassRow {
    seed: u64,
    category: String,
    image_auroc: f64,
    pixel_auroc: f64,
    prompt_only_image_auroc: f64,
    prompt_only_pixel_auroc: f64,
}

#[derive(Serialize)]
struct PredictionRow {
    image: String,
    heatmap: String,
    score: f64,
    p_hat: f64,
    map_max: f64,
}

pub fn predict(args: &PredictArgs) -> CliResult<PathBuf> {
    let (mut m, trained) = load_trained(&args.from, args.data.as_deref())?;
    let cfg = m.config.clone();
    let model = trained.model_for(&args.category)?;
    let bank = if cfg.memory.enabled {
        let shots: Vec<&RgbImage> = trained.shots_for(&args.category)?.iter().collect();
        Some(model.build_memory(&shots, &cfg.memory.layers, cfg.memory.prompted)?)
    } else {
        None
    };
    let text = model.text_features()?;
    let res = model.backbone.config().input_resolution as u32;
    let run = run_dir(args.run.as_deref(), &cfg, "predict", &m.seeds)?;
    let heat_dir = run.join("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|e| CliError::io(&heat_dir, e))?;
    let mut rows = Vec::new();
    for (i, path) in args.images.iter().enumerate() {
        let img = dataset::load_rgb(path)?;
        let whole = make_views(
            path.display().to_string(),
            &img,
            None,
            ViewMode::Test,
            model.prompts.n_views(),
            res,
        )?
        .whole()
        .image
        .clone();
        let px = images_to_tensor(&[&whole], model.dtype())?;
        let pred = model
            .predict(&px, &text, bank.as_ref().map(|b| (b, cfg.memory.prompted)))?
            .remove(0);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let heat = format!("heatmaps/{i:04}_{stem}.png");
        write_heatmap(&run.join(&heat), &pred.map)?;
        println!("{}\t{:.6}", path.display(), pred.score);
        rows.push(PredictionRow {
            image: path.display().to_string(),
            heatmap: heat,
            score: pred.score,
            p_hat: pred.p_hat,
            map_max: pred.map.max() as f64,
        });
    }
    write_json(&run.join("predictions.json"), &rows)?;
    write_csv(&run.join("predictions.csv"), &rows)?;
    m.command = "predict".into();
    m.checkpoints.clear();
    m.outputs = vec![
        "predictions.json".into(),
        "predictions.csv".into(),
        "heatmaps/".into(),
    ];
    m.write(&run)?;
    Ok(run)
}

pub fn synth(args: &SynthArgs) -> CliResult<PathBuf> {
    let spec = synthetic::SyntheticSpec {
        categories: args.categories.clone(),
        train_normals: args.train_normals,
        test_images: args.test_images,
        defect_fraction: args.defect_fraction,
        image_size: args.image_size,
        seed: args.seed,
    };
    let dirs = synthetic::generate(&args.out, &spec)?;
    for d in &dirs {
        println!("{}", d.display());
    }
    Ok(args.out.clone())
}
