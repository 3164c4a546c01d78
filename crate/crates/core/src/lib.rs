//! Few-shot anomaly detection with bidirectionally coupled multi-modal deep
//! prompts on a frozen CLIP-style dual encoder.
//!
//! Training sees only the k normal shots and simulated anomalies derived from
//! them. Inference fuses the decoder's map with a nearest-neighbour map over a
//! memory of the shots' patch features.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod interp;
pub mod losses;
pub mod memory;
pub mod model;
pub mod prompt;
pub mod scoring;
pub mod synth;
pub mod synthetic;
pub mod train;
pub mod views;

pub use backbone::{ClipBackbone, NoPrompts, PromptHook, Tokenizer};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{ClassResult, EvalRun, ScoreRecord};
pub use memory::MemoryBank;
pub use model::{AnoPle, LossTerms, Prediction, TextFeatures, TrainBatch};
pub use prompt::PromptStack;
pub use scoring::{AnomalyMap, Provenance, ScoreReport};
