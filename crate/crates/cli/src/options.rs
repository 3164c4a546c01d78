//! Command-line arguments and how they override the TOML configuration.

use std::path::{Path, PathBuf};

use anople_core::config::Coupling;
use anople_core::RunConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "anople",
    version,
    about = "Few-shot anomaly detection from normal images only"
)]
pub struct Cli {
    /// Log filter, e.g. `info` or `anople_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample shots, train prompts and decoder, write checkpoints.
    Train(TrainArgs),
    /// Score test splits, from a trained run or by training each seed afresh.
    Eval(EvalArgs),
    /// Heatmaps and scores for individual images.
    Predict(PredictArgs),
    /// Write a procedural texture dataset in the MVTec layout.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CouplingArg {
    Bidirectional,
    TextToVision,
    VisionToText,
    Independent,
}

impl From<CouplingArg> for Coupling {
    fn from(c: CouplingArg) -> Self {
        match c {
            CouplingArg::Bidirectional => Coupling::Bidirectional,
            CouplingArg::TextToVision => Coupling::TextToVision,
            CouplingArg::VisionToText => Coupling::VisionToText,
            CouplingArg::Independent => Coupling::Independent,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; the tiny preset when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Dataset root in the MVTec layout.
    #[arg(long, env = "ANOPLE_DATA_ROOT")]
    pub data: Option<PathBuf>,

    /// Restrict to these categories (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,

    /// Reference shots per category.
    #[arg(long)]
    pub k: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub prompt_lr: Option<f64>,

    #[arg(long)]
    pub decoder_lr: Option<f64>,

    #[arg(long, value_enum)]
    pub coupling: Option<CouplingArg>,

    /// One model per category instead of one shared model.
    #[arg(long)]
    pub per_class: bool,

    /// Score with the prompted encoders and decoder only.
    #[arg(long)]
    pub no_memory: bool,

    /// Parent directory for run directories.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::tiny(),
        };
        if let Some(d) = &self.data {
            cfg.dataset.root = Some(d.clone());
        }
        if !self.categories.is_empty() {
            cfg.dataset.categories = self.categories.clone();
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.prompt_lr {
            cfg.train.prompt_lr = lr;
        }
        if let Some(lr) = self.decoder_lr {
            cfg.train.decoder_lr = lr;
        }
        if let Some(c) = self.coupling {
            cfg.prompt.coupling = c.into();
        }
        cfg.per_class |= self.per_class;
        if self.no_memory {
            cfg.memory.enabled = false;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|source| CliError::ConfigFile {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Episode seed; the first configured seed when omitted.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Run directory; derived from the config hash and seed when omitted.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Evaluate the checkpoints of this training run instead of training.
    #[arg(long, conflicts_with = "seeds")]
    pub from: Option<PathBuf>,

    /// Seeds to train and evaluate (comma separated); the configured list when omitted.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Training run holding the checkpoints.
    #[arg(long)]
    pub from: PathBuf,

    /// Category whose model and reference shots are used.
    #[arg(long)]
    pub category: String,

    /// Dataset root for the reference shots; the training run's when omitted.
    #[arg(long, env = "ANOPLE_DATA_ROOT")]
    pub data: Option<PathBuf>,

    #[arg(long)]
    pub run: Option<PathBuf>,

    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Destination root; categories become subdirectories.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_delimiter = ',', default_value = "fabric")]
    pub categories: Vec<String>,

    #[arg(long, default_value_t = 64)]
    pub train_normals: usize,

    #[arg(long, default_value_t = 200)]
    pub test_images: usize,

    #[arg(long, default_value_t = 0.5)]
    pub defect_fraction: f64,

    #[arg(long, default_value_t = 240)]
    pub image_size: u32,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
