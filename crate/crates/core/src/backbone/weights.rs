//! OpenCLIP weight naming, shape checks and random initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Attention, Block, LayerNorm, Linear};
use super::{TextTower, VisionTower};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};

fn block_shapes(prefix: &str, d: usize, mlp: usize) -> Vec<(String, Vec<usize>)> {
    let h = d * mlp;
    [
        ("ln_1.weight", vec![d]),
        ("ln_1.bias", vec![d]),
        ("attn.in_proj_weight", vec![3 * d, d]),
        ("attn.in_proj_bias", vec![3 * d]),
        ("attn.out_proj.weight", vec![d, d]),
        ("attn.out_proj.bias", vec![d]),
        ("ln_2.weight", vec![d]),
        ("ln_2.bias", vec![d]),
        ("mlp.c_fc.weight", vec![h, d]),
        ("mlp.c_fc.bias", vec![h]),
        ("mlp.c_proj.weight", vec![d, h]),
        ("mlp.c_proj.bias", vec![d]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{prefix}.{n}"), s))
    .collect()
}

/// Every tensor the towers need, with its expected shape.
fn expected_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let (dv, dt, e, p) = (cfg.vision_dim, cfg.text_dim, cfg.embed_dim, cfg.patch_size);
    let mut out = vec![
        ("visual.conv1.weight".to_string(), vec![dv, 3, p, p]),
        ("visual.class_embedding".into(), vec![dv]),
        (
            "visual.positional_embedding".into(),
            vec![cfg.num_patches() + 1, dv],
        ),
        ("visual.ln_pre.weight".into(), vec![dv]),
        ("visual.ln_pre.bias".into(), vec![dv]),
        ("visual.ln_post.weight".into(), vec![dv]),
        ("visual.ln_post.bias".into(), vec![dv]),
        ("visual.proj".into(), vec![dv, e]),
        ("token_embedding.weight".into(), vec![cfg.vocab_size, dt]),
        ("positional_embedding".into(), vec![cfg.context_length, dt]),
        ("ln_final.weight".into(), vec![dt]),
        ("ln_final.bias".into(), vec![dt]),
        ("text_projection".into(), vec![dt, e]),
        ("logit_scale".into(), vec![]),
    ];
    for i in 0..cfg.vision_layers {
        out.extend(block_shapes(
            &format!("visual.transformer.resblocks.{i}"),
            dv,
            cfg.mlp_ratio,
        ));
    }
    for i in 0..cfg.text_layers {
        out.extend(block_shapes(
            &format!("transformer.resblocks.{i}"),
            dt,
            cfg.mlp_ratio,
        ));
    }
    out
}

pub(super) fn check_shapes(cfg: &BackboneConfig, w: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, shape) in expected_shapes(cfg) {
        let t = w
            .get(&name)
            .ok_or_else(|| Error::config(format!("weights missing tensor {name}")))?;
        let dims = t.dims();
        // logit_scale ships as either a scalar or a 1-element vector.
        let ok = if shape.is_empty() {
            t.elem_count() == 1
        } else {
            dims == shape.as_slice()
        };
        if !ok {
            return Err(Error::config(format!(
                "tensor {name} has shape {dims:?}, config expects {shape:?}"
            )));
        }
    }
    Ok(())
}

pub(super) fn random_init(
    cfg: &BackboneConfig,
    seed: u64,
    dtype: DType,
) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let layers = cfg.vision_layers.max(cfg.text_layers) as f64;
    for (name, shape) in expected_shapes(cfg) {
        let width = if name.starts_with("visual") {
            cfg.vision_dim
        } else {
            cfg.text_dim
        } as f64;
        let count: usize = shape.iter().product();
        let std = if name.ends_with("ln_1.weight")
            || name.ends_with("ln_2.weight")
            || name.ends_with("ln_pre.weight")
            || name.ends_with("ln_post.weight")
            || name.ends_with("ln_final.weight")
        {
            None
        } else if name.ends_with("bias") {
            Some(0.0)
        } else if name == "logit_scale" {
            None
        } else if name.ends_with("attn.in_proj_weight") {
            Some(width.powf(-0.5))
        } else if name.ends_with("attn.out_proj.weight") || name.ends_with("mlp.c_proj.weight") {
            Some(width.powf(-0.5) * (2.0 * layers).powf(-0.5))
        } else if name.ends_with("mlp.c_fc.weight") {
            Some((2.0 * width).powf(-0.5))
        } else if name == "visual.conv1.weight" {
            Some((3.0 * (cfg.patch_size * cfg.patch_size) as f64).powf(-0.5))
        } else if name == "token_embedding.weight" {
            Some(0.02)
        } else if name == "positional_embedding" {
            Some(0.01)
        } else {
            Some(width.powf(-0.5))
        };
        let data: Vec<f64> = match std {
            Some(s) if s > 0.0 => {
                let normal = Normal::new(0.0, s).expect("valid std");
                (0..count).map(|_| normal.sample(&mut rng)).collect()
            }
            Some(_) => vec![0.0; count],
            None if name == "logit_scale" => vec![(1.0f64 / 0.07).ln()],
            None => vec![1.0; count],
        };
        let t = Tensor::from_vec(data, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
        out.insert(name, t);
    }
    Ok(out)
}

fn ln(w: &BTreeMap<String, Tensor>, prefix: &str, eps: f64) -> LayerNorm {
    LayerNorm {
        weight: w[&format!("{prefix}.weight")].clone(),
        bias: w[&format!("{prefix}.bias")].clone(),
        eps,
    }
}

fn block(cfg: &BackboneConfig, w: &BTreeMap<String, Tensor>, prefix: &str, heads: usize) -> Block {
    let get = |n: &str| w[&format!("{prefix}.{n}")].clone();
    Block {
        ln_1: ln(w, &format!("{prefix}.ln_1"), cfg.layer_norm_eps),
        attn: Attention {
            in_proj: Linear {
                weight: get("attn.in_proj_weight"),
                bias: Some(get("attn.in_proj_bias")),
            },
            out_proj: Linear {
                weight: get("attn.out_proj.weight"),
                bias: Some(get("attn.out_proj.bias")),
            },
            heads,
        },
        ln_2: ln(w, &format!("{prefix}.ln_2"), cfg.layer_norm_eps),
        c_fc: Linear {
            weight: get("mlp.c_fc.weight"),
            bias: Some(get("mlp.c_fc.bias")),
        },
        c_proj: Linear {
            weight: get("mlp.c_proj.weight"),
            bias: Some(get("mlp.c_proj.bias")),
        },
        activation: cfg.activation,
    }
}

pub(super) fn vision_tower(
    cfg: &BackboneConfig,
    w: &BTreeMap<String, Tensor>,
) -> Result<VisionTower> {
    Ok(VisionTower {
        conv1: w["visual.conv1.weight"].clone(),
        class_embedding: w["visual.class_embedding"].clone(),
        positional_embedding: w["visual.positional_embedding"].clone(),
        ln_pre: ln(w, "visual.ln_pre", cfg.layer_norm_eps),
        blocks: (0..cfg.vision_layers)
            .map(|i| {
                block(
                    cfg,
                    w,
                    &format!("visual.transformer.resblocks.{i}"),
                    cfg.vision_heads,
                )
            })
            .collect(),
        ln_post: ln(w, "visual.ln_post", cfg.layer_norm_eps),
        proj: w["visual.proj"].clone(),
    })
}

pub(super) fn text_tower(cfg: &BackboneConfig, w: &BTreeMap<String, Tensor>) -> Result<TextTower> {
    Ok(TextTower {
        token_embedding: w["token_embedding.weight"].clone(),
        positional_embedding: w["positional_embedding"].clone(),
        blocks: (0..cfg.text_layers)
            .map(|i| {
                block(
                    cfg,
                    w,
                    &format!("transformer.resblocks.{i}"),
                    cfg.text_heads,
                )
            })
            .collect(),
        ln_final: ln(w, "ln_final", cfg.layer_norm_eps),
        text_projection: w["text_projection"].clone(),
    })
}
