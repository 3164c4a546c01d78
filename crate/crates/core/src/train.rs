//! SGD with momentum and decoupled parameter groups, linear warm-up from zero,
//! and per-step metrics.

use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SynthConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{AnoPle, TrainBatch};
use crate::synth::TextureSource;

/// PyTorch-style SGD: `v = m v + (g + wd p)`, `p -= lr v`.
#[derive(Debug)]
pub struct Sgd {
    groups: Vec<ParamGroup>,
    momentum: f64,
    weight_decay: f64,
}

#[derive(Debug)]
struct ParamGroup {
    base_lr: f64,
    params: Vec<(Var, Option<Tensor>)>,
}

impl Sgd {
    /// `groups` pairs each parameter list with its base learning rate.
    pub fn new(groups: Vec<(Vec<Var>, f64)>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            groups: groups
                .into_iter()
                .map(|(params, base_lr)| ParamGroup {
                    base_lr,
                    params: params.into_iter().map(|p| (p, None)).collect(),
                })
                .collect(),
            momentum,
            weight_decay,
        }
    }

    /// One update with every group's rate multiplied by `lr_factor`.
    pub fn step(&mut self, loss: &Tensor, lr_factor: f64) -> Result<()> {
        let grads = loss.backward()?;
        for group in &mut self.groups {
            let lr = group.base_lr * lr_factor;
            for (param, velocity) in &mut group.params {
                let Some(g) = grads.get(param.as_tensor()) else {
                    continue;
                };
                let mut g = g.clone();
                if self.weight_decay != 0.0 {
                    g = (g + (param.as_tensor() * self.weight_decay)?)?;
                }
                let v = match velocity.take() {
                    Some(v) if self.momentum != 0.0 => ((v * self.momentum)? + g)?,
                    _ => g,
                };
                if lr != 0.0 {
                    param.set(&(param.as_tensor() - (&v * lr)?)?)?;
                }
                *velocity = Some(v.detach());
            }
        }
        Ok(())
    }
}

/// Multiplier on the base learning rates: ramps linearly from zero over the
/// first `warmup_steps` steps, then stays at one.
pub fn warmup_factor(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_factor: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean breakdown over each epoch's steps.
    pub epoch_means: Vec<LossBreakdown>,
}

fn mean_breakdown(records: &[LossBreakdown]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| records.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_pixel: sum(|r| r.l_pixel),
        l_img: sum(|r| r.l_img),
        l_align: sum(|r| r.l_align),
        l_total: sum(|r| r.l_total),
    }
}

/// Optimizes the prompt stack and decoder on `shots`. Each epoch visits every
/// shot `iterations_per_shot` times in shuffled order with fresh anomalies.
/// Step records go to `metrics` as JSON lines when given.
pub fn train(
    model: &AnoPle,
    shots: &[RgbImage],
    train: &TrainConfig,
    synth: &SynthConfig,
    textures: &TextureSource,
    rng: &mut impl Rng,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if shots.is_empty() {
        return Err(Error::config("training needs at least one shot"));
    }
    if train.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (prompt_params, decoder_params) = model.parameter_groups();
    let mut opt = Sgd::new(
        vec![
            (prompt_params, train.prompt_lr),
            (decoder_params, train.decoder_lr),
        ],
        train.momentum,
        train.weight_decay,
    );
    let per_epoch_items = shots.len() * train.iterations_per_shot.max(1);
    let steps_per_epoch = per_epoch_items.div_ceil(train.batch_size);
    let warmup = train.warmup_epochs * steps_per_epoch;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..per_epoch_items).map(|i| i % shots.len()).collect();
        order.shuffle(rng);
        let mut epoch_records = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(train.batch_size) {
            let batch_imgs: Vec<&RgbImage> = chunk.iter().map(|&i| &shots[i]).collect();
            let batch = TrainBatch::prepare(&batch_imgs, model, synth, textures, rng)?;
            let objective = model.objective(&batch)?;
            if !objective.breakdown.l_total.is_finite() {
                return Err(Error::State(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let factor = warmup_factor(step, warmup);
            opt.step(&objective.total, factor)?;
            if let Some(w) = metrics.as_deref_mut() {
                let rec = StepRecord {
                    epoch,
                    step,
                    lr_factor: factor,
                    loss: objective.breakdown,
                };
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io("metrics", e))?;
            }
            log::debug!(
                "epoch {epoch} step {step} loss {:.5}",
                objective.breakdown.l_total
            );
            epoch_records.push(objective.breakdown);
            step += 1;
        }
        let mean = mean_breakdown(&epoch_records);
        log::info!("epoch {epoch}: mean loss {:.5}", mean.l_total);
        report.epoch_means.push(mean);
    }
    report.steps = step;
    Ok(report)
}

/// Opens a metrics file for appending JSON lines.
pub fn open_metrics(path: &Path) -> Result<std::fs::File> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}
