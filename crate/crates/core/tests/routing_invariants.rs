//! Isolation and equivalence properties of the expert registry and the adapter pool.

use peftcl_core::harness::data::{Dataset, PatternStyle};
use peftcl_core::harness::objectives::{AdapterObjective, Targets};
use peftcl_core::harness::run::{run_scenario, Method, RunSettings, Variant};
use peftcl_core::harness::stream::{make_stream, Scenario, Source, StreamSpec, SyntheticSpec, Task};
use peftcl_core::harness::train::{fit, OptimizerName, TrainConfig};
use peftcl_core::l2x::{init_pool, l2x_forward, l2x_train_task, query_features, L2xObjective, Surrogate};
use peftcl_core::harness::train::Objective;
use peftcl_core::peft::{AdapterKind, PeftSpec};
use peftcl_core::rng::{Seed, StreamId};
use peftcl_core::sx::{sx_train_task, ExpertRegistry, SxVariant};
use peftcl_core::vit::{ProjectionSite, ViTConfig, ViTParams};
use peftcl_core::Tape;

fn model() -> ViTConfig {
    ViTConfig {
        image_height: 8,
        image_width: 8,
        channels: 3,
        patch_size: 4,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 6,
        ..ViTConfig::default()
    }
    .conventional()
}

fn train_cfg(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: OptimizerName::AdamW,
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 0.0,
        cosine: false,
        eta_min: 0.0,
    }
}

fn settings() -> RunSettings {
    let t = train_cfg(2, 8);
    RunSettings {
        model: model(),
        prompt_length: 2,
        lora_rank: 2,
        pool_size: 4,
        select_count: 2,
        sx_train: t.clone(),
        l2p_train: t.clone(),
        l2l_train: t.clone(),
        finetune_train: t.clone(),
        joint_train: t,
        ..RunSettings::default()
    }
}

fn stream(scenario: Scenario, seed: u64) -> Vec<Task> {
    let syn = SyntheticSpec {
        height: 8,
        width: 8,
        channels: 3,
        noise: 0.3,
        train_per_class: 6,
        test_per_class: 5,
        style: PatternStyle::default(),
        family: "invariants".into(),
    };
    let spec = match scenario {
        Scenario::Cil => StreamSpec::cil(6, 3, Source::Synthetic(syn)).unwrap(),
        Scenario::Dil => StreamSpec::dil(6, 3, Source::Synthetic(syn)).unwrap(),
    };
    make_stream(&spec, Seed(seed)).unwrap()
}

fn frozen_base() -> ViTParams {
    let mut p = ViTParams::init(&model(), Seed(11)).unwrap();
    p.set_backbone_trainable(false);
    p
}

#[test]
fn forced_routing_columns_are_constant() {
    let base = frozen_base();
    for scenario in [Scenario::Cil, Scenario::Dil] {
        for method in [Method::SPrompts, Method::SLora] {
            for plus_plus in [false, true] {
                let variant = Variant {
                    sx: SxVariant { plus_plus, shared_head: false },
                    forced_routing: true,
                };
                let tasks = stream(scenario, 5);
                let (rec, _) = run_scenario(method, variant, scenario, 6, &tasks, &base, &settings(), Seed(2)).unwrap();
                for j in 0..3 {
                    for i in j..3 {
                        assert_eq!(rec.matrix.tally(i, j), rec.matrix.tally(j, j), "{scenario:?} {method:?} R[{i}][{j}]");
                    }
                }
                assert_eq!(rec.forgetting, Some(0.0));
                assert_eq!(rec.backward_transfer, Some(0.0));
            }
        }
    }
}

#[test]
fn experts_are_untouched_by_later_tasks() {
    let base = frozen_base();
    let s = settings();
    let tasks = stream(Scenario::Cil, 6);
    for kind in [AdapterKind::Prompt, AdapterKind::Lora] {
        let sx = s.sx_config(kind, SxVariant::default(), 2);
        let mut reg = ExpertRegistry::new(&model(), 6, SxVariant::default(), Seed(3));
        let mut snapshots = Vec::new();
        for t in &tasks {
            sx_train_task(&mut reg, &t.train, &t.classes, &model(), &base, &sx, Seed(3)).unwrap();
            snapshots.push((reg.experts.last().unwrap().clone(), reg.prototypes.last().unwrap().clone()));
        }
        for (e, (expert, protos)) in snapshots.iter().enumerate() {
            assert_eq!(&reg.experts[e], expert);
            assert_eq!(&reg.prototypes[e], protos);
        }
    }
}

fn l2x_setup(kind: AdapterKind, pool_size: usize, select_count: usize, lambda: f64) -> peftcl_core::l2x::L2xConfig {
    let mut s = settings();
    s.pool_size = pool_size;
    s.select_count = select_count;
    s.lambda = lambda;
    s.l2x_config(kind)
}

#[test]
fn unselected_modules_and_keys_stay_bitwise_fixed() {
    let base = frozen_base();
    let tasks = stream(Scenario::Cil, 7);
    let data = &tasks[0].train;
    for kind in [AdapterKind::Prompt, AdapterKind::Lora] {
        for surrogate in [Surrogate::OneMinusCos, Surrogate::RawGamma] {
            let mut l2x = l2x_setup(kind, 6, 2, 0.1);
            l2x.surrogate = surrogate;
            // one full-batch step: the selection is fixed by the initial keys
            l2x.train = train_cfg(1, data.len());
            let mut pool = init_pool(&model(), &l2x, 6, Seed(4)).unwrap();
            let before = pool.clone();
            let queries = query_features(&model(), &base, data, 64).unwrap();
            let mut used: Vec<usize> = queries
                .iter()
                .flat_map(|q| pool.select(q).unwrap().indices)
                .collect();
            used.sort_unstable();
            used.dedup();
            assert!(used.len() < 6, "every module selected; the check would be vacuous");
            l2x_train_task(&mut pool, data, &tasks[0].classes, true, &model(), &base, &l2x, Seed(4), 0).unwrap();
            for i in 0..6 {
                let same = pool.modules[i] == before.modules[i] && pool.keys[i] == before.keys[i];
                assert_eq!(same, !used.contains(&i), "{kind:?} module {i}, used {used:?}");
            }
        }
    }
}

#[test]
fn gradients_reach_only_selected_modules() {
    let base = frozen_base();
    let tasks = stream(Scenario::Cil, 8);
    let data = &tasks[1].train;
    let l2x = l2x_setup(AdapterKind::Lora, 5, 1, 0.5);
    let mut pool = init_pool(&model(), &l2x, 6, Seed(5)).unwrap();
    let queries = query_features(&model(), &base, data, 64).unwrap();
    for batch in [vec![0usize], vec![1, 2, 3], (0..data.len()).collect()] {
        let used: Vec<usize> = batch.iter().map(|&i| pool.select(&queries[i]).unwrap().indices[0]).collect();
        let mut obj = L2xObjective {
            cfg: &model(),
            base: &base,
            data,
            pool: &mut pool,
            queries: &queries,
            mask: None,
        };
        let mut tape = Tape::new();
        let (out, bound) = obj.build(&mut tape, &batch).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        obj.absorb(&bound, &grads).unwrap();
        for i in 0..5 {
            let module_has = obj.pool.modules[i].tensors().iter().any(|t| t.grad().is_some());
            let key_has = obj.pool.keys[i].grad().is_some();
            assert_eq!(module_has, used.contains(&i), "module {i}");
            assert_eq!(key_has, used.contains(&i), "key {i}");
        }
        for p in obj.params_mut() {
            p.zero_grad();
        }
    }
}

/// A single-module pool without the key term trains exactly like that module alone.
#[test]
fn single_module_pool_matches_plain_adapter() {
    let base = frozen_base();
    let tasks = stream(Scenario::Cil, 9);
    let data: &Dataset = &tasks[0].train;
    for kind in [AdapterKind::Prompt, AdapterKind::Lora] {
        let l2x = l2x_setup(kind, 1, 1, 0.0);
        let mut pool = init_pool(&model(), &l2x, 6, Seed(6)).unwrap();
        let mut payload = pool.modules[0].clone();
        let mut head = pool.head.clone();
        l2x_train_task(&mut pool, data, &tasks[0].classes, true, &model(), &base, &l2x, Seed(6), 0).unwrap();
        {
            let mut obj = AdapterObjective {
                cfg: &model(),
                base: &base,
                data,
                payload: Some(&mut payload),
                head: &mut head,
                targets: Targets::global(data, 6, Some(&tasks[0].classes)),
            };
            fit(&mut obj, &l2x.train, Seed(6), StreamId::named("l2x-train").with(0)).unwrap();
        }
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
        for (a, b) in pool.modules[0].tensors().iter().zip(payload.tensors()) {
            assert!(close(a.data(), b.data()), "{kind:?} module diverged");
        }
        assert!(close(pool.head.weight.data(), head.weight.data()));
        assert!(close(pool.head.bias.data(), head.bias.data()));
    }
}

#[test]
fn pool_order_does_not_change_predictions() {
    let base = frozen_base();
    let tasks = stream(Scenario::Cil, 10);
    let test = &tasks[0].test;
    let perm = [3usize, 0, 4, 1, 2];
    for kind in [AdapterKind::Prompt, AdapterKind::Lora] {
        let l2x = l2x_setup(kind, 5, 3, 0.1);
        let mut pool = init_pool(&model(), &l2x, 6, Seed(7)).unwrap();
        // nonzero increments so every module matters
        for m in &mut pool.modules {
            for t in m.tensors_mut() {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.01 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        let mut permuted = pool.clone();
        permuted.modules = perm.iter().map(|&i| pool.modules[i].clone()).collect();
        permuted.keys = perm.iter().map(|&i| pool.keys[i].clone()).collect();
        let images = test.all_refs();
        let queries = query_features(&model(), &base, test, 64).unwrap();
        let logits = |p: &peftcl_core::l2x::AdapterPool| {
            let sel: Vec<_> = queries.iter().map(|q| p.select(q).unwrap()).collect();
            let mut tape = Tape::new();
            let (l, _, _) = l2x_forward(&mut tape, &model(), &base, p, &images, &sel).unwrap();
            tape.value(l).to_vec()
        };
        let (a, b) = (logits(&pool), logits(&permuted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12, "{kind:?}: {x} vs {y}");
        }
    }
}

#[test]
fn lora_targets_only_adapt_listed_projections() {
    let spec = PeftSpec::Lora {
        rank: 1,
        targets: vec![ProjectionSite::Query, ProjectionSite::Value],
        alpha: None,
    };
    let p = spec.init(&model(), Seed(1), StreamId::named("t")).unwrap();
    // two sites, two layers, (8 + 8) parameters each
    assert_eq!(p.param_count(), 2 * 2 * 16);
}
