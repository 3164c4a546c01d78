//! Checks shared by the acceptance runner and the integration tests. Each
//! returns whether it held plus a one-line summary of what was measured.

use std::time::{Duration, Instant};

use anople_core::backbone::NoPrompts;
use anople_core::config::{BackboneConfig, Coupling, PromptConfig, RunConfig, SynthConfig};
use anople_core::eval::auroc;
use anople_core::prompt::{build_text_inputs, PromptStack};
use anople_core::scoring::{fuse_maps, harmonic, image_score, AnomalyMap, Provenance};
use anople_core::synth::{
    simulate_pixel_anomaly, simulate_with_seed, LatentPerturbation, TextureSource,
};
use anople_core::views::{crop_geometry, make_views, ViewMode};
use anople_core::{dataset, eval, synthetic, ClipBackbone, MemoryBank};
use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::oracles::{brute_force_memory, pairwise_auroc, reciprocal_harmonic, unit_rows};

pub struct Outcome {
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            ok,
            detail: detail.into(),
        }
    }
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let (model, batch) = gradcheck::tiny_f64_model(3);
    let worst = gradcheck::check(&model, &batch, 3, 11);
    let elapsed = start.elapsed();
    let max = worst.iter().map(|m| m.rel).fold(0.0, f64::max);
    let all_terms = worst.len() == gradcheck::TERMS.len();
    let ok = all_terms && max < 1e-4 && elapsed < Duration::from_secs(60);
    let per_term: Vec<String> = worst
        .iter()
        .map(|m| format!("{} {:.1e} ({})", m.term, m.rel, m.tensor))
        .collect();
    Outcome::new(
        ok,
        format!(
            "worst relative error {max:.2e} in {:.1?}; {}",
            elapsed,
            per_term.join(", ")
        ),
    )
}

fn map(values: Vec<f32>) -> AnomalyMap {
    let n = values.len();
    AnomalyMap::new(1, n, values, Provenance::Decoder).unwrap()
}

pub fn fusion(probes: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = Vec::new();
    for i in 0..probes {
        let a: f64 = rng.random_range(1e-3..=1.0);
        let b: f64 = rng.random_range(1e-3..=1.0);
        let d: f64 = rng.random_range(1e-3..=0.5);
        if harmonic(a, b) != harmonic(b, a) {
            violations.push(format!("asymmetric at ({a}, {b})"));
        }
        if harmonic(a + d, b) <= harmonic(a, b) {
            violations.push(format!("not increasing at ({a}, {b}) + {d}"));
        }
        let expected = reciprocal_harmonic(a, b);
        if (harmonic(a, b) - expected).abs() > 1e-12 * expected {
            violations.push(format!("differs from the reciprocal form at ({a}, {b})"));
        }
        // The same properties through the map-level API.
        let (fa, fb, fd) = (a as f32, b as f32, d as f32);
        let ab = fuse_maps(&map(vec![fa, fa + fd]), &map(vec![fb, fb])).unwrap();
        let ba = fuse_maps(&map(vec![fb, fb]), &map(vec![fa, fa + fd])).unwrap();
        if ab.values != ba.values {
            violations.push(format!("fuse_maps asymmetric at probe {i}"));
        }
        if ab.values[1] <= ab.values[0] {
            violations.push(format!("fuse_maps not increasing at probe {i}"));
        }
        let lo = image_score(a, &map(vec![fb])).unwrap();
        let hi = image_score(a + d, &map(vec![fb])).unwrap();
        let up = image_score(a, &map(vec![fb + fd])).unwrap();
        if hi <= lo || up <= lo {
            violations.push(format!("image_score not increasing at probe {i}"));
        }
    }
    let half = fuse_maps(&map(vec![0.5]), &map(vec![0.5])).unwrap().values[0];
    if half != 0.25 {
        violations.push(format!("fuse(0.5, 0.5) = {half}"));
    }
    let top = image_score(1.0, &map(vec![1.0])).unwrap();
    if top != 0.5 {
        violations.push(format!("score(1, 1) = {top}"));
    }
    Outcome::new(
        violations.is_empty(),
        format!(
            "{probes} probes, {} violations{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    )
}

pub fn memory(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0f64;
    for _ in 0..instances {
        let dim = rng.random_range(2..=64);
        let m = rng.random_range(1..=1000);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let rows = unit_rows(m, dim, &mut rng);
        let queries = unit_rows(h * w, dim, &mut rng);
        let bank = MemoryBank::from_rows(rows.clone(), dim, (h, w)).unwrap();
        let q = Tensor::from_vec(queries.clone(), (h, w, dim), &Device::Cpu).unwrap();
        let got = bank.query(&q).unwrap();
        let want = brute_force_memory(&queries, &rows, dim);
        for (g, e) in got.iter().zip(&want) {
            worst = worst.max((*g as f64 - e).abs());
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("{instances} instances, max deviation {worst:.2e}"),
    )
}

pub fn auroc_oracle(sets: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut mismatches = 0;
    for _ in 0..sets {
        let n = rng.random_range(2..=1000);
        // Coarse levels force plenty of ties.
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        if auroc(&scores, &labels).unwrap() != pairwise_auroc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let hand = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    Outcome::new(
        mismatches == 0 && hand == 0.75,
        format!("{sets} sets, {mismatches} mismatches; hand case {hand}"),
    )
}

fn striped_image(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            (x * 7 % 256) as u8,
            (y * 5 % 256) as u8,
            ((x + y) * 3 % 256) as u8,
        ])
    })
}

pub fn simulation() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let cfg = SynthConfig::default();
    let img = striped_image(96, 80);
    let textures = TextureSource::SelfAugmented;
    let mut changed_outside = 0usize;
    for seed in 0..20 {
        let a = simulate_with_seed(&img, &textures, &cfg, seed).unwrap();
        for (x, y, m) in a.mask.enumerate_pixels() {
            if m[0] == 0 && a.image.get_pixel(x, y) != img.get_pixel(x, y) {
                changed_outside += 1;
            }
        }
    }
    ok &= changed_outside == 0;
    notes.push(format!("{changed_outside} pixels changed outside masks"));

    let (mu, sigma) = (0.1, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            LatentPerturbation::sample(1, mu, sigma, &mut rng)
                .unwrap()
                .epsilon[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let rel = (var - sigma * sigma).abs() / (sigma * sigma);
    ok &= rel < 0.05;
    notes.push(format!("latent variance off by {:.2}%", rel * 100.0));

    let again = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = simulate_pixel_anomaly(&img, &textures, &cfg, &mut r).unwrap();
        let l = LatentPerturbation::sample(8, mu, sigma, &mut r).unwrap();
        (a.image, a.mask, a.beta, l.epsilon)
    };
    let deterministic = again(5) == again(5) && again(5) != again(6);
    ok &= deterministic;
    notes.push(format!("seeded replay identical: {deterministic}"));
    Outcome::new(ok, notes.join("; "))
}

pub fn views() -> Outcome {
    let res = 240u32;
    let geoms = crop_geometry(4, res).unwrap();
    let frame = geoms[0].frame;
    let mut bad_pixels = 0usize;
    for y in 0..frame {
        for x in 0..frame {
            if geoms.iter().filter(|g| g.contains(x, y)).count() != 1 {
                bad_pixels += 1;
            }
        }
    }
    let mut routing_errors = 0usize;
    for src in [frame, res] {
        let img = striped_image(src, src);
        let half = src / 2;
        for q in 0..4u32 {
            let (qx, qy) = ((q % 2) * half, (q / 2) * half);
            let mask = GrayImage::from_fn(src, src, |x, y| {
                let inside = x >= qx && x < qx + half && y >= qy && y < qy + half;
                Luma([if inside { 200 } else { 0 }])
            });
            let batch = make_views("quadrant", &img, Some(&mask), ViewMode::Train, 4, res).unwrap();
            for v in &batch.views {
                let m = v.mask.as_ref().unwrap();
                for (x, y, p) in m.enumerate_pixels() {
                    let expected = if v.index == 5 {
                        let h = res / 2;
                        x >= (q % 2) * h
                            && x < (q % 2) * h + h
                            && y >= (q / 2) * h
                            && y < (q / 2) * h + h
                    } else {
                        v.index == q as usize + 1
                    };
                    if (p[0] == 255) != expected || (p[0] != 0 && p[0] != 255) {
                        routing_errors += 1;
                    }
                }
            }
        }
    }
    let indices: Vec<usize> = geoms.iter().map(|g| g.index).collect();
    let ok = bad_pixels == 0 && routing_errors == 0 && indices == [1, 2, 3, 4];
    Outcome::new(
        ok,
        format!(
            "{frame}x{frame} frame: {bad_pixels} pixels not covered exactly once; \
             {routing_errors} misrouted mask pixels"
        ),
    )
}

pub fn zero_prompt_identity() -> Outcome {
    let bcfg = BackboneConfig::tiny();
    let backbone = ClipBackbone::tiny(&bcfg, 7, DType::F32).unwrap();
    let pcfg = PromptConfig {
        text_ctx: 0,
        vision_ctx: 0,
        ..PromptConfig::mvtec()
    };
    let stack =
        PromptStack::new(&pcfg, &bcfg, &mut ChaCha8Rng::seed_from_u64(1), DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs: Vec<RgbImage> = (0..3)
        .map(|_| synthetic::normal_image("fabric", 240, &mut rng))
        .collect();
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    let px = anople_core::views::images_to_tensor(&refs, DType::F32).unwrap();
    let bits = |t: &Tensor| -> Vec<u32> {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    let plain = backbone.encode_image(&px).unwrap();
    let mut same = true;
    for view in [1, 5] {
        let prompted = backbone
            .encode_image_with_prompts(&px, &stack, &[view; 3], &[2])
            .unwrap();
        let reference = backbone
            .encode_image_with_prompts(&px, &NoPrompts, &[view; 3], &[2])
            .unwrap();
        same &= bits(&prompted.cls) == bits(&plain.cls);
        same &= bits(&prompted.patches) == bits(&plain.patches);
        same &= bits(&prompted.captured[0]) == bits(&reference.captured[0]);
    }
    let inputs = build_text_inputs(&backbone, &["fabric".to_string()]).unwrap();
    let ids = [inputs.normal, inputs.abnormal].concat();
    let text_same = bits(&backbone.encode_text_with_prompts(&ids, &stack).unwrap())
        == bits(&backbone.encode_text(&ids).unwrap());
    Outcome::new(
        same && text_same,
        format!("vision outputs identical: {same}; text outputs identical: {text_same}"),
    )
}

/// Configuration used by the end-to-end smoke run.
pub fn smoke_config() -> RunConfig {
    RunConfig::tiny()
}

pub struct SmokeRun {
    pub elapsed: Duration,
    pub runs: Vec<eval::EvalRun>,
}

/// Trains and evaluates one episode per seed on the generated dataset.
pub fn run_smoke(root: &std::path::Path, config: &RunConfig, seeds: &[u64]) -> SmokeRun {
    let start = Instant::now();
    let cats = dataset::discover(root, &[]).unwrap();
    let backbone =
        ClipBackbone::tiny(config.backbone.config(), 0, config.precision.dtype()).unwrap();
    let runs = seeds
        .iter()
        .map(|&s| eval::run_episode(config, s, &cats, &backbone).unwrap().0)
        .collect();
    SmokeRun {
        elapsed: start.elapsed(),
        runs,
    }
}

pub fn generate_smoke_dataset(root: &std::path::Path) {
    synthetic::generate(root, &synthetic::SyntheticSpec::default()).unwrap();
}

pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

pub fn end_to_end(root: &std::path::Path) -> Outcome {
    let config = smoke_config();
    let smoke = run_smoke(root, &config, &[0]);
    let run = &smoke.runs[0];
    let ok = run.image_auroc >= 0.85
        && run.pixel_auroc >= 0.80
        && smoke.elapsed < Duration::from_secs(600);
    Outcome::new(
        ok,
        format!(
            "image AUROC {:.4}, pixel AUROC {:.4} in {:.1?}",
            run.image_auroc, run.pixel_auroc, smoke.elapsed
        ),
    )
}

/// Bidirectional coupling against independent prompts, on the image AUROC
/// of the prompted encoders and decoder alone.
pub fn ablation(root: &std::path::Path) -> Outcome {
    let mut config = smoke_config();
    config.memory.enabled = false;
    let mean = |c: &RunConfig| {
        let runs = run_smoke(root, c, &ABLATION_SEEDS).runs;
        let v: Vec<f64> = runs.iter().map(|r| r.prompt_only_image_auroc).collect();
        (v.iter().sum::<f64>() / v.len() as f64, v)
    };
    config.prompt.coupling = Coupling::Bidirectional;
    let (bi, bi_runs) = mean(&config);
    config.prompt.coupling = Coupling::Independent;
    let (ind, ind_runs) = mean(&config);
    Outcome::new(
        ind < bi,
        format!(
            "bidirectional {bi:.4} {bi_runs:.3?} vs independent {ind:.4} {ind_runs:.3?} \
             over seeds {ABLATION_SEEDS:?}"
        ),
    )
}
