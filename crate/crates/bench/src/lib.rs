//! Deterministic inputs shared by the benchmarks.

use anople_core::config::RunConfig;
use anople_core::synth::TextureSource;
use anople_core::{synthetic, AnoPle, ClipBackbone, TrainBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of unit length in `dim` dimensions.
pub fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

/// Scores with roughly a third positives and heavy ties.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    let scores = labels
        .iter()
        .map(|&l| (r.random_range(0..1000) as f64 + if l { 300.0 } else { 0.0 }) / 1300.0)
        .collect();
    (scores, labels)
}

/// A tiny-preset model and one prepared training batch.
pub fn tiny_model_and_batch() -> (AnoPle, TrainBatch) {
    let cfg = RunConfig::tiny();
    let bb = ClipBackbone::from_spec(&cfg.backbone, cfg.precision.dtype()).expect("tiny backbone");
    let mut r = rng(0);
    let model = AnoPle::new(bb, &cfg, &["fabric".to_string()], &mut r).expect("model");
    let img = synthetic::normal_image("fabric", 240, &mut r);
    let batch = TrainBatch::prepare(
        &[&img],
        &model,
        &cfg.synth,
        &TextureSource::SelfAugmented,
        &mut r,
    )
    .expect("batch");
    (model, batch)
}
