//! Run directories: the manifest, result tables and heatmaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anople_core::{AnomalyMap, RunConfig};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub backbone_checksum: String,
    pub categories: Vec<String>,
    /// Relative to the run directory.
    #[serde(default)]
    pub checkpoints: Vec<Checkpoint>,
    #[serde(default)]
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn read(run: &Path) -> CliResult<Self> {
        let path = run.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, run: &Path) -> CliResult<()> {
        write_json(&run.join(MANIFEST), self)
    }
}

/// `<output_dir>/<command>-<hash prefix>-s<seed>` unless given explicitly.
pub fn run_dir(
    explicit: Option<&Path>,
    cfg: &RunConfig,
    command: &str,
    seeds: &[u64],
) -> CliResult<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
            cfg.output_dir.join(format!(
                "{command}-{}-s{}",
                &cfg.hash()[..12],
                seeds.join("_")
            ))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Anomaly values in [0, 1] quantized to the full 16-bit range.
pub fn write_heatmap(path: &Path, map: &AnomalyMap) -> CliResult<()> {
    let pixels: Vec<u16> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, pixels)
            .ok_or_else(|| CliError::Usage("heatmap buffer size mismatch".into()))?;
    img.save(path).map_err(anople_core::Error::from)?;
    Ok(())
}
