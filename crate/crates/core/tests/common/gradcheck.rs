//! Central finite differences against autograd on a tiny double-precision model.

use anople_core::config::{BackboneConfig, BackboneSpec, Precision, RunConfig};
use anople_core::synth::TextureSource;
use anople_core::{AnoPle, ClipBackbone, LossTerms, TrainBatch};
use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TERMS: [&str; 5] = ["dice", "focal", "img", "align", "total"];

/// Double precision, 8x8 decoder maps over a 4x4 patch grid.
pub fn tiny_f64_config(seed: u64) -> RunConfig {
    let bb = BackboneConfig {
        text_dim: 16,
        vision_dim: 16,
        embed_dim: 16,
        text_layers: 2,
        vision_layers: 2,
        text_heads: 2,
        vision_heads: 2,
        patch_size: 8,
        input_resolution: 32,
        context_length: 24,
        prompt_depth: 2,
        ..BackboneConfig::tiny()
    };
    let mut cfg = RunConfig::tiny();
    cfg.precision = Precision::F64;
    cfg.decoder.hidden = 8;
    cfg.decoder.map_size = [8, 8];
    cfg.memory.layers = vec![1];
    cfg.backbone = BackboneSpec::Tiny { seed, config: bb };
    cfg
}

pub fn tiny_f64_model(seed: u64) -> (AnoPle, TrainBatch) {
    let cfg = tiny_f64_config(seed);
    let backbone = ClipBackbone::from_spec(&cfg.backbone, cfg.precision.dtype()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = AnoPle::new(backbone, &cfg, &["fabric".to_string()], &mut rng).unwrap();
    // Larger prompt init so the coupling paths carry non-trivial gradient.
    for (_, v) in model.prompts.named_tensors() {
        let t = v.as_tensor();
        let normal = rand_distr::Normal::new(0.0, 0.2).unwrap();
        let data: Vec<f64> = (0..t.elem_count()).map(|_| rng.sample(normal)).collect();
        let noise = Tensor::from_vec(data, t.dims(), t.device()).unwrap();
        v.set(&(t + noise).unwrap()).unwrap();
    }
    let img = anople_core::synthetic::normal_image("fabric", 64, &mut rng);
    let batch = TrainBatch::prepare(
        &[&img],
        &model,
        &cfg.synth,
        &TextureSource::SelfAugmented,
        &mut rng,
    )
    .unwrap();
    (model, batch)
}

fn term(terms: &LossTerms, name: &str) -> Tensor {
    match name {
        "dice" => terms.dice.clone(),
        "focal" => terms.focal.clone(),
        "img" => terms.img.clone(),
        "align" => terms.align.clone(),
        _ => terms.clone().into_objective().unwrap().total,
    }
}

fn value(model: &AnoPle, batch: &TrainBatch, name: &str) -> f64 {
    let t = term(&model.loss_terms(batch).unwrap(), name);
    t.to_scalar::<f64>().unwrap()
}

fn nudge(v: &Var, flat: usize, delta: f64) {
    let t = v.as_tensor();
    let mut data: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
    data[flat] += delta;
    v.set(&Tensor::from_vec(data, t.dims(), t.device()).unwrap())
        .unwrap();
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub term: String,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Worst relative error per term over `per_tensor` random entries of every
/// trainable tensor.
pub fn check(model: &AnoPle, batch: &TrainBatch, per_tensor: usize, seed: u64) -> Vec<Mismatch> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.named_tensors();
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|(_, v)| {
            let n = v.as_tensor().elem_count();
            (0..per_tensor.min(n))
                .map(|_| rng.random_range(0..n))
                .collect()
        })
        .collect();
    let mut worst = Vec::new();
    for name in TERMS {
        let grads = term(&model.loss_terms(batch).unwrap(), name)
            .backward()
            .unwrap();
        let mut w: Option<Mismatch> = None;
        for ((pname, v), idx) in params.iter().zip(&picks) {
            let g: Vec<f64> = match grads.get(v.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
                None => vec![0.0; v.as_tensor().elem_count()],
            };
            for &i in idx {
                nudge(v, i, h);
                let up = value(model, batch, name);
                nudge(v, i, -2.0 * h);
                let down = value(model, batch, name);
                nudge(v, i, h);
                let numeric = (up - down) / (2.0 * h);
                let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-7);
                if w.as_ref().is_none_or(|m| rel > m.rel) {
                    w = Some(Mismatch {
                        term: name.into(),
                        tensor: pname.clone(),
                        index: i,
                        analytic: g[i],
                        numeric,
                        rel,
                    });
                }
            }
        }
        worst.extend(w);
    }
    worst
}
