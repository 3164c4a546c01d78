//! Prompt stack and decoder weights in a safetensors file whose metadata
//! header carries the run configuration, class list and backbone checksum.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ClipBackbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::AnoPle;

const FORMAT: &str = "anople-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub backbone_checksum: String,
    /// Set for per-class checkpoints.
    pub category: Option<String>,
    pub seed: u64,
}

pub fn save(path: &Path, model: &AnoPle, meta: &CheckpointMeta) -> Result<()> {
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    let tensors: Vec<(String, Tensor)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(tensors, Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata header".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(bad("not an anople checkpoint".into()));
    }
    let meta: CheckpointMeta = serde_json::from_str(
        info.get("meta")
            .ok_or_else(|| bad("missing run metadata".into()))?,
    )?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors))
}

/// Overwrites the model's parameters with checkpoint tensors.
pub fn restore(model: &AnoPle, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in model.named_tensors() {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Rebuilds a model around `backbone`, refusing a backbone other than the one
/// the checkpoint was trained on.
pub fn load_model(path: &Path, backbone: ClipBackbone) -> Result<(AnoPle, CheckpointMeta)> {
    let (meta, tensors) = read(path)?;
    let sum = backbone.checksum()?;
    if sum != meta.backbone_checksum {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on backbone {}, got {sum}",
            meta.backbone_checksum
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = AnoPle::new(backbone, &meta.config, &meta.classes, &mut rng)?;
    restore(&model, &tensors)?;
    Ok((model, meta))
}
