//! Central-difference verification of training gradients.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::peft::{AdapterKind, PeftSpec};
use crate::rng::{Seed, StreamId};
use crate::tensor::{Tape, Tensor};
use crate::vit::{Head, ProjectionSite, ViTConfig, ViTParams};

use super::data::{sample_classes, pattern_bank, PatternStyle};
use super::objectives::{AdapterObjective, FullObjective, Targets};
use super::train::Objective;

/// Worst disagreement between analytic and numeric partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor index, element)` of the worst coordinate.
    pub worst: (usize, usize),
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn batch_loss<O: Objective>(obj: &O, tape: &mut Tape, batch: &[usize]) -> Result<f64> {
    tape.reset();
    let (out, _) = obj.build(tape, batch)?;
    Ok(tape.scalar_value(out.loss))
}

/// Compares backprop against central differences at `coords` random trainable coordinates.
pub fn check_objective<O: Objective>(obj: &mut O, batch: &[usize], coords: usize, h: f64, floor: f64, seed: Seed) -> Result<GradReport> {
    let mut tape = Tape::new();
    for p in obj.params_mut() {
        p.zero_grad();
    }
    let (out, bound) = obj.build(&mut tape, batch)?;
    let grads = tape.backward(out.loss)?;
    obj.absorb(&bound, &grads)?;
    let analytic: Vec<Vec<f64>> = obj
        .params_mut()
        .iter()
        .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Contract("objective has no trainable coordinates".into()));
    }
    let mut rng = seed.stream(StreamId::named("gradcheck"));
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let orig = obj.params_mut()[k].data()[flat];
        obj.params_mut()[k].data_mut()[flat] = orig + h;
        let up = batch_loss(obj, &mut tape, batch)?;
        obj.params_mut()[k].data_mut()[flat] = orig - h;
        let down = batch_loss(obj, &mut tape, batch)?;
        obj.params_mut()[k].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[k][flat], numeric, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (k, flat);
        }
        report.checked += 1;
    }
    for p in obj.params_mut() {
        p.zero_grad();
    }
    Ok(report)
}

/// Which parameters a gradient check trains.
#[derive(Debug, Clone, PartialEq)]
pub enum GradMode {
    Full,
    Peft(PeftSpec),
}

impl GradMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradMode::Full => "full",
            GradMode::Peft(s) => match s.kind() {
                AdapterKind::Prompt => "prompt",
                AdapterKind::Lora => "lora",
            },
        }
    }

    /// Full fine-tuning, a 3-token prompt and rank-2 LoRA on every projection.
    pub fn all() -> Vec<GradMode> {
        vec![
            GradMode::Full,
            GradMode::Peft(PeftSpec::Prompt { length: 3 }),
            GradMode::Peft(PeftSpec::Lora {
                rank: 2,
                targets: ProjectionSite::ALL.to_vec(),
                alpha: None,
            }),
        ]
    }
}

/// D=8, L=2, H=2 on 8x8 RGB images with 4-pixel patches.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_height: 8,
        image_width: 8,
        channels: 3,
        patch_size: 4,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 3,
        ..ViTConfig::default()
    }
}

fn jitter(t: &mut Tensor, std: f64, rng: &mut crate::rng::StreamRng) {
    let noise = Tensor::randn(t.shape(), std, rng);
    for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
        *v += n;
    }
}

/// Gradient check of the batch cross-entropy for one mode on random data.
///
/// Adapter parameters are jittered away from their initialization so that
/// zero-initialized LoRA factors also receive nonzero gradients.
pub fn training_gradient_check(mode: &GradMode, cfg: &ViTConfig, coords: usize, seed: Seed) -> Result<GradReport> {
    let bank = pattern_bank(cfg.num_classes, cfg.channels, &PatternStyle::default(), seed, "gradcheck");
    let classes: Vec<usize> = (0..cfg.num_classes).collect();
    let shape = (cfg.image_height, cfg.image_width, cfg.channels);
    let data = sample_classes(&bank, &classes, 2, shape, 0.2, seed, StreamId::named("gradcheck-data"))?;
    let batch: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed.stream(StreamId::named("gradcheck-jitter"));
    let (h, floor) = (1e-5, 1e-6);
    match mode {
        GradMode::Full => {
            let mut params = ViTParams::init(cfg, seed)?;
            params.set_backbone_trainable(true);
            for t in params.all_tensors_mut() {
                jitter(t, 0.05, &mut rng);
            }
            let mut obj = FullObjective {
                cfg,
                params: &mut params,
                data: &data,
                targets: Targets::global(&data, cfg.num_classes, None),
            };
            check_objective(&mut obj, &batch, coords, h, floor, seed)
        }
        GradMode::Peft(spec) => {
            let base = ViTParams::init(cfg, seed)?;
            let mut payload = spec.init(cfg, seed, StreamId::named("gradcheck-adapter"))?;
            for t in payload.tensors_mut() {
                jitter(t, 0.1, &mut rng);
            }
            let mut head = Head::init(cfg.hidden_dim, cfg.num_classes, seed, StreamId::named("gradcheck-head"));
            let mut obj = AdapterObjective {
                cfg,
                base: &base,
                data: &data,
                payload: Some(&mut payload),
                head: &mut head,
                targets: Targets::global(&data, cfg.num_classes, None),
            };
            check_objective(&mut obj, &batch, coords, h, floor, seed)
        }
    }
}
