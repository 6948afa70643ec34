//! Inference throughput for trained methods.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::l2x::l2x_predict;
use crate::peft::{adapted_features, features_with, merge_into, Adaptation, BoundLora, BoundPayload, Payload};
use crate::sx::{select_expert, ExpertRegistry};
use crate::tensor::Tape;
use crate::vit::{classify_batch, ViTConfig, ViTParams};

use super::run::TrainedState;
use super::stream::Task;

/// Which inference workload is timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Every batch comes from one task whose identity is known; LoRA experts are merged.
    Best,
    /// Batches mix tasks; routing runs per sample and adapters are applied per sample.
    Average,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Best => "best",
            Regime::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "best" => Some(Regime::Best),
            "average" => Some(Regime::Average),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub batch_size: usize,
    /// Untimed batches before measuring.
    pub warmup: usize,
    pub trials: usize,
    pub batches_per_trial: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            batch_size: 32,
            warmup: 3,
            trials: 5,
            batches_per_trial: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    /// `best`, `average`, or `n/a` for methods without a regime distinction.
    pub regime: String,
    /// Median over trials, in images per second.
    pub images_per_sec: f64,
    pub trials: Vec<f64>,
}

/// Per-expert inference paths prepared ahead of timing.
enum Prepared<'a> {
    Finetuned(&'a ViTParams),
    Registry {
        registry: &'a ExpertRegistry,
        merged: Vec<Option<ViTParams>>,
    },
    Pool(&'a crate::l2x::AdapterPool),
}

fn prepare<'a>(state: &'a TrainedState, base: &ViTParams, regime: Regime) -> Result<Prepared<'a>> {
    Ok(match state {
        TrainedState::Finetuned(p) => Prepared::Finetuned(p),
        TrainedState::Pool(p) => Prepared::Pool(p),
        TrainedState::Registry(r) => {
            let merged = r
                .experts
                .iter()
                .map(|e| match (&e.payload, regime) {
                    (Payload::Lora(l), Regime::Best) => merge_into(base, l).map(Some),
                    _ => Ok(None),
                })
                .collect::<Result<_>>()?;
            Prepared::Registry { registry: r, merged }
        }
    })
}

fn head_argmax(features: &[f64], head: &crate::vit::Head) -> usize {
    let c = head.classes();
    let mut logits = head.bias.data().to_vec();
    for (d, &f) in features.iter().enumerate() {
        for (o, w) in logits.iter_mut().zip(&head.weight.data()[d * c..(d + 1) * c]) {
            *o += f * w;
        }
    }
    super::train::masked_argmax(&logits, None)
}

fn registry_head(registry: &ExpertRegistry, e: usize) -> Result<&crate::vit::Head> {
    registry.experts[e]
        .head
        .as_ref()
        .or(registry.shared_head.as_ref())
        .ok_or_else(|| Error::Contract("expert has no head".into()))
}

/// Mixed batch: route every sample, then one forward with per-sample adapters.
fn registry_average(cfg: &ViTConfig, base: &ViTParams, registry: &ExpertRegistry, images: &[&[f32]]) -> Result<Vec<usize>> {
    let queries = registry.embed(cfg, base, images, images.len())?;
    let experts: Vec<usize> = queries.iter().map(|q| select_expert(q, registry)).collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let vit = base.bind(&mut tape);
    let bound: Vec<BoundPayload> = registry.experts.iter().map(|e| e.payload.bind(&mut tape)).collect();
    let adaptation = match &bound[0] {
        BoundPayload::Prompt(_) => Adaptation::prompt_lists(
            experts
                .iter()
                .map(|&e| match &bound[e] {
                    BoundPayload::Prompt(v) => vec![*v],
                    BoundPayload::Lora(_) => unreachable!("experts share a kind"),
                })
                .collect(),
        ),
        BoundPayload::Lora(_) => {
            let loras: Vec<&BoundLora> = bound
                .iter()
                .map(|b| match b {
                    BoundPayload::Lora(l) => l,
                    BoundPayload::Prompt(_) => unreachable!("experts share a kind"),
                })
                .collect();
            let weights: Vec<Vec<f64>> = experts
                .iter()
                .map(|&e| (0..loras.len()).map(|i| f64::from(u8::from(i == e))).collect())
                .collect();
            Adaptation::lora_mixture(&loras, &weights, cfg.num_layers)?
        }
    };
    let f = adapted_features(&mut tape, cfg, &vit, images, &adaptation)?;
    let d = cfg.hidden_dim;
    experts
        .iter()
        .zip(tape.value(f).chunks(d))
        .map(|(&e, feat)| Ok(head_argmax(feat, registry_head(registry, e)?)))
        .collect()
}

fn run_batch(
    prepared: &Prepared<'_>,
    regime: Regime,
    cfg: &ViTConfig,
    base: &ViTParams,
    images: &[&[f32]],
    task: usize,
) -> Result<Vec<usize>> {
    match prepared {
        Prepared::Finetuned(p) => {
            let mut tape = Tape::new();
            let vit = p.bind(&mut tape);
            let head = p.head.bind(&mut tape);
            let f = adapted_features(&mut tape, cfg, &vit, images, &Adaptation::none())?;
            let logits = classify_batch(&mut tape, f, &head)?;
            let c = p.head.classes();
            Ok(tape.value(logits).chunks(c).map(|r| super::train::masked_argmax(r, None)).collect())
        }
        Prepared::Pool(pool) => l2x_predict(pool, cfg, base, images, images.len()),
        Prepared::Registry { registry, merged } => match regime {
            Regime::Average => registry_average(cfg, base, registry, images),
            Regime::Best => {
                let features = match &merged[task] {
                    Some(m) => features_with(cfg, m, None, images, images.len())?,
                    None => features_with(cfg, base, Some(&registry.experts[task].payload), images, images.len())?,
                };
                let head = registry_head(registry, task)?;
                Ok(features.iter().map(|f| head_argmax(f, head)).collect())
            }
        },
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Batches for a regime: single-task batches cycling over tasks, or batches interleaving all tasks.
fn batches(tasks: &[Task], regime: Regime, batch_size: usize, count: usize) -> Vec<(usize, Vec<&[f32]>)> {
    (0..count)
        .map(|b| match regime {
            Regime::Best => {
                let t = b % tasks.len();
                let test = &tasks[t].test;
                (t, (0..batch_size).map(|i| test.image((b * batch_size + i) % test.len())).collect())
            }
            Regime::Average => {
                let imgs = (0..batch_size)
                    .map(|i| {
                        let k = b * batch_size + i;
                        let test = &tasks[k % tasks.len()].test;
                        test.image((k / tasks.len()) % test.len())
                    })
                    .collect();
                (0, imgs)
            }
        })
        .collect()
}

/// Median images per second over timed trials, after untimed warmup batches.
pub fn throughput(
    state: &TrainedState,
    regime: Regime,
    cfg: &ViTConfig,
    base: &ViTParams,
    tasks: &[Task],
    settings: &BenchSettings,
) -> Result<Throughput> {
    if settings.trials < 5 || settings.batch_size == 0 || settings.batches_per_trial == 0 {
        return Err(Error::Config("benchmark needs at least 5 trials and non-empty batches".into()));
    }
    if tasks.is_empty() || tasks.iter().any(|t| t.test.is_empty()) {
        return Err(Error::Stream("benchmark needs non-empty test sets".into()));
    }
    let seen = match state {
        TrainedState::Registry(r) => r.len(),
        _ => tasks.len(),
    };
    let tasks = &tasks[..seen.min(tasks.len())];
    let prepared = prepare(state, base, regime)?;
    let label = match state {
        TrainedState::Registry(_) => regime.as_str(),
        _ => "n/a",
    };
    for (t, imgs) in batches(tasks, regime, settings.batch_size, settings.warmup) {
        run_batch(&prepared, regime, cfg, base, &imgs, t)?;
    }
    let mut trials = Vec::with_capacity(settings.trials);
    for trial in 0..settings.trials {
        let work = batches(tasks, regime, settings.batch_size, settings.warmup + (trial + 1) * settings.batches_per_trial);
        let work = &work[settings.warmup + trial * settings.batches_per_trial..];
        let start = Instant::now();
        for (t, imgs) in work {
            std::hint::black_box(run_batch(&prepared, regime, cfg, base, imgs, *t)?);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        trials.push((work.len() * settings.batch_size) as f64 / secs);
    }
    Ok(Throughput {
        regime: label.to_string(),
        images_per_sec: median(&trials),
        trials,
    })
}
