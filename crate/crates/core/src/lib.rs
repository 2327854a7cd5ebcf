//! Dense context-aware networks for semantic segmentation.

pub mod augment;
pub mod backbone;
pub mod check;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dca;
mod error;
pub mod experiment;
pub mod infer;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod oracles;
pub mod structures;
pub mod train;
pub mod viz;

pub use backbone::{BackboneConfig, BackbonePreset};
pub use dca::{DcaConfig, DcaModule, DcaOutput, ForwardOptions, MaskFn, PathwayPair};
pub use error::{DcaError, Result};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use network::{LossWeights, Model, ModelConfig, Network, IGNORE_INDEX};
pub use structures::{FinalTap, ScaleSchedule, Structure, StructureConfig, StructureKind, StructureOutput};
