//! Parameter-efficient adapters: soft prompts, low-rank projections, and the
//! masked multi-adapter forward used when a batch mixes experts.

mod adapter;
mod lora;
mod prompt;

pub use adapter::{
    adapted_features, features_with, Adaptation, AdapterKind, AdapterSet, BoundAdapter, BoundLora, BoundPayload,
    Payload, PeftSpec,
};
pub use lora::{
    format_targets, init_lora, lora_linear_forward, merge_into, merge_lora, multi_lora_masked_forward, parse_targets,
    Assignment, LoraPair, LoraParams, LORA_INIT_STD,
};
pub use prompt::{init_prompt, prepend_prompt, prepend_prompt_list, PromptParams, PROMPT_INIT_BOUND};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use crate::rng::{Seed, StreamId};
    use crate::tensor::{Tape, Tensor};
    use crate::vit::{classify_batch, extract_features, ProjectionSite, ViTConfig, ViTParams};

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            num_classes: 3,
            ..ViTConfig::default()
        }
        .conventional()
    }

    fn images(n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = Seed(seed).named("img");
        (0..n)
            .map(|_| Tensor::randn(&[64], 1.0, &mut rng).data().iter().map(|&v| v as f32).collect())
            .collect()
    }

    fn lora_spec(rank: usize) -> PeftSpec {
        PeftSpec::Lora {
            rank,
            targets: vec![ProjectionSite::Query, ProjectionSite::Value],
            alpha: None,
        }
    }

    fn randomize(payload: &mut Payload, seed: u64) {
        let mut rng = Seed(seed).named("perturb");
        for t in payload.tensors_mut() {
            let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    #[test]
    fn fresh_lora_is_bitwise_identity() {
        let cfg = tiny();
        let p = ViTParams::init(&cfg, Seed(1)).unwrap();
        let set = AdapterSet::new(&lora_spec(2), &cfg, None, Seed(2), StreamId::named("a")).unwrap();
        let imgs = images(3, 4);
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let base = extract_features(&cfg, &p, &refs).unwrap();
        let adapted = features_with(&cfg, &p, Some(&set.payload), &refs, 2).unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn merged_backbone_matches_adapter_forward() {
        let cfg = tiny();
        let p = ViTParams::init(&cfg, Seed(1)).unwrap();
        let mut set = AdapterSet::new(&lora_spec(2), &cfg, None, Seed(2), StreamId::named("a")).unwrap();
        randomize(&mut set.payload, 9);
        let Payload::Lora(lora) = &set.payload else { unreachable!() };
        let merged = merge_into(&p, lora).unwrap();
        let imgs = images(3, 5);
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let a = features_with(&cfg, &p, Some(&set.payload), &refs, 8).unwrap();
        let b = extract_features(&cfg, &merged, &refs).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_scales_the_increment() {
        let cfg = tiny();
        let p = ViTParams::init(&cfg, Seed(1)).unwrap();
        let mut set = AdapterSet::new(&lora_spec(1), &cfg, None, Seed(2), StreamId::named("a")).unwrap();
        randomize(&mut set.payload, 3);
        let mut doubled = set.payload.clone();
        let mut halved_up = set.payload.clone();
        if let (Payload::Lora(d), Payload::Lora(h)) = (&mut doubled, &mut halved_up) {
            d.alpha = 2.0;
            for pair in h.pairs.iter_mut().flatten() {
                for v in pair.up.data_mut() {
                    *v *= 2.0;
                }
            }
        }
        let imgs = images(2, 6);
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let a = features_with(&cfg, &p, Some(&doubled), &refs, 8).unwrap();
        let b = features_with(&cfg, &p, Some(&halved_up), &refs, 8).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_adapter_changes_sequence_and_features() {
        let cfg = tiny();
        let p = ViTParams::init(&cfg, Seed(1)).unwrap();
        let set = AdapterSet::new(&PeftSpec::Prompt { length: 3 }, &cfg, None, Seed(2), StreamId::named("a")).unwrap();
        let imgs = images(2, 7);
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let base = extract_features(&cfg, &p, &refs).unwrap();
        let adapted = features_with(&cfg, &p, Some(&set.payload), &refs, 8).unwrap();
        assert_ne!(base, adapted);
        assert_eq!(adapted[0].len(), 8);
    }

    #[test]
    fn gradients_reach_only_adapter_and_head() {
        let cfg = tiny();
        let mut p = ViTParams::init(&cfg, Seed(1)).unwrap();
        p.set_backbone_trainable(false);
        for spec in [lora_spec(2), PeftSpec::Prompt { length: 2 }] {
            let mut set = AdapterSet::new(&spec, &cfg, Some(3), Seed(2), StreamId::named("a")).unwrap();
            let imgs = images(4, 8);
            let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let vit = p.bind(&mut tape);
            let bound = set.bind(&mut tape);
            let f = adapted_features(&mut tape, &cfg, &vit, &refs, &Adaptation::single(&bound.payload, 2)).unwrap();
            let logits = classify_batch(&mut tape, f, bound.head.as_ref().unwrap()).unwrap();
            let loss = tape.cross_entropy_masked(logits, &[0, 1, 2, 0], &[true; 3]).unwrap();
            let grads = tape.backward(loss).unwrap();
            p.absorb(&vit, &grads).unwrap();
            set.absorb(&bound, &grads).unwrap();
            for t in p.backbone_tensors_mut() {
                assert!(t.grad().is_none());
            }
            let with_grad = set.tensors_mut().into_iter().filter(|t| t.grad().is_some()).count();
            assert!(with_grad > 0);
        }
    }

    #[test]
    fn linear_additivity_of_two_sets() {
        let mut rng = Seed(11).named("add");
        let w = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let z = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let s1 = LoraPair {
            down: Tensor::randn(&[6, 2], 1.0, &mut rng),
            up: Tensor::randn(&[2, 6], 1.0, &mut rng),
        };
        let s2 = LoraPair {
            down: Tensor::randn(&[6, 1], 1.0, &mut rng),
            up: Tensor::randn(&[1, 6], 1.0, &mut rng),
        };
        let both = multi_lora_masked_forward(&z, &w, &[&s1, &s2], &Assignment::Weights(vec![vec![1.0, 1.0]; 5]), 1)
            .unwrap();
        let base = z.matmul(&w).unwrap();
        let y1 = lora_linear_forward(&w, &s1, &z).unwrap();
        let y2 = lora_linear_forward(&w, &s2, &z).unwrap();
        for i in 0..both.numel() {
            let expect = y1.data()[i] + y2.data()[i] - base.data()[i];
            assert!((both.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        for (i, spec) in [lora_spec(3), PeftSpec::Prompt { length: 4 }].iter().enumerate() {
            let mut set = AdapterSet::new(spec, &cfg, Some(2), Seed(5), StreamId::named("a")).unwrap();
            randomize(&mut set.payload, 1);
            let stem = dir.path().join(format!("ad{i}"));
            set.to_checkpoint().write(&stem).unwrap();
            let back = AdapterSet::from_checkpoint(&Checkpoint::read(&stem).unwrap(), &cfg).unwrap();
            assert_eq!(back, set);
            assert_eq!(back.kind(), spec.kind());
        }
    }
}
