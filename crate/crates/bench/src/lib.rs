//! Fixtures shared by the benchmarks: a desk-sized model, LoRA experts and images.

use peftcl_core::peft::{Payload, PeftSpec};
use peftcl_core::rng::{Seed, StreamId};
use peftcl_core::tensor::Tensor;
use peftcl_core::vit::{ProjectionSite, ViTConfig, ViTParams};

/// 16x16 RGB images, 4-pixel patches, D=32, two layers.
pub fn desk_model() -> ViTConfig {
    ViTConfig {
        image_height: 16,
        image_width: 16,
        channels: 3,
        patch_size: 4,
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 4,
        ffn_dim: 64,
        num_classes: 10,
        ..ViTConfig::default()
    }
    .conventional()
}

pub fn backbone(cfg: &ViTConfig) -> ViTParams {
    ViTParams::init(cfg, Seed(1)).expect("valid config")
}

/// `n` rank-`rank` experts on the query and value projections with nonzero increments.
pub fn lora_experts(cfg: &ViTConfig, n: usize, rank: usize) -> Vec<Payload> {
    let spec = PeftSpec::Lora {
        rank,
        targets: vec![ProjectionSite::Query, ProjectionSite::Value],
        alpha: None,
    };
    let mut rng = Seed(2).named("bench-experts");
    (0..n)
        .map(|i| {
            let mut p = spec.init(cfg, Seed(3), StreamId::named("bench-expert").with(i as u64)).expect("valid spec");
            for t in p.tensors_mut() {
                let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
                for (v, d) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v += d;
                }
            }
            p
        })
        .collect()
}

pub fn images(cfg: &ViTConfig, n: usize) -> Vec<Vec<f32>> {
    let len = cfg.image_height * cfg.image_width * cfg.channels;
    let mut rng = Seed(4).named("bench-images");
    (0..n)
        .map(|_| Tensor::randn(&[len], 1.0, &mut rng).data().iter().map(|&v| v as f32).collect())
        .collect()
}
