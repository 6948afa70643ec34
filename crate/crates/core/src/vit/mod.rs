//! The base vision transformer: patch embedding, pre-norm MHSA/FFN blocks,
//! class-token readout and linear heads.

mod config;
mod forward;
mod params;

pub use config::{AttentionScale, ProjectionSite, ViTConfig};
pub use forward::{
    classify, classify_batch, embed_images, encode, encode_traced, extract_features, patchify, patchify_embed,
    prepend_prompts, vit_forward, Increments, LowRankTerm, Sequence,
};
pub use params::{BlockParams, BoundBlock, BoundHead, BoundVit, Head, ViTParams};

use crate::error::{Error, Result};

/// What a fine-tuning run trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainableMode {
    Full,
    Prompt { length: usize },
    Lora { rank: usize, targets: Vec<ProjectionSite> },
}

/// Exact trainable parameter count for a mode, including the classifier head.
pub fn count_trainable_params(mode: &TrainableMode, cfg: &ViTConfig) -> Result<usize> {
    let d = cfg.hidden_dim;
    let head = cfg.head_param_count(cfg.num_classes);
    match mode {
        TrainableMode::Full => Ok(cfg.backbone_param_count() + head),
        TrainableMode::Prompt { length } => {
            if *length == 0 {
                return Err(Error::Config("prompt length must be at least 1".into()));
            }
            Ok(length * d + head)
        }
        TrainableMode::Lora { rank, targets } => {
            if *rank == 0 {
                return Err(Error::Config("LoRA rank must be at least 1".into()));
            }
            if cfg.bare_blocks && targets.contains(&ProjectionSite::Output) {
                return Err(Error::Config("bare blocks have no output projection to adapt".into()));
            }
            Ok(cfg.num_layers * targets.len() * rank * (d + d) + head)
        }
    }
}
