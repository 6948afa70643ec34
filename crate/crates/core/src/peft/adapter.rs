use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{Seed, StreamId};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::vit::{
    embed_images, encode, prepend_prompts, BoundHead, BoundVit, Head, Increments, LowRankTerm, ProjectionSite,
    ViTConfig, ViTParams,
};

use super::lora::{format_targets, init_lora, parse_targets, LoraPair, LoraParams};
use super::prompt::{init_prompt, PromptParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Prompt,
    Lora,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Prompt => "prompt",
            AdapterKind::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prompt" => Some(AdapterKind::Prompt),
            "lora" => Some(AdapterKind::Lora),
            _ => None,
        }
    }
}

/// Shape of a fresh adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum PeftSpec {
    Prompt { length: usize },
    Lora { rank: usize, targets: Vec<ProjectionSite>, alpha: Option<f64> },
}

impl PeftSpec {
    pub fn kind(&self) -> AdapterKind {
        match self {
            PeftSpec::Prompt { .. } => AdapterKind::Prompt,
            PeftSpec::Lora { .. } => AdapterKind::Lora,
        }
    }

    pub fn init(&self, cfg: &ViTConfig, seed: Seed, stream: StreamId) -> Result<Payload> {
        match self {
            PeftSpec::Prompt { length } => Ok(Payload::Prompt(init_prompt(*length, cfg.hidden_dim, seed, stream)?)),
            PeftSpec::Lora { rank, targets, alpha } => {
                if cfg.bare_blocks && targets.contains(&ProjectionSite::Output) {
                    return Err(Error::Config("bare blocks have no output projection to adapt".into()));
                }
                let mut lora = init_lora(*rank, targets, cfg.hidden_dim, cfg.num_layers, seed, stream)?;
                if let Some(a) = alpha {
                    lora.alpha = *a;
                }
                Ok(Payload::Lora(lora))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Prompt(PromptParams),
    Lora(LoraParams),
}

/// One expert's trainable state: a prompt or LoRA payload plus an optional head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub payload: Payload,
    pub head: Option<Head>,
}

#[derive(Debug, Clone)]
pub struct BoundLora {
    pub targets: Vec<ProjectionSite>,
    pub scaling: f64,
    /// `(down, up)` per layer and target.
    pub pairs: Vec<Vec<(Var, Var)>>,
}

#[derive(Debug, Clone)]
pub enum BoundPayload {
    Prompt(Var),
    Lora(BoundLora),
}

#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub payload: BoundPayload,
    pub head: Option<BoundHead>,
}

impl Payload {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Payload::Prompt(_) => AdapterKind::Prompt,
            Payload::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Payload::Prompt(p) => p.param_count(),
            Payload::Lora(l) => l.param_count(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Payload::Prompt(p) => vec![&p.tokens],
            Payload::Lora(l) => l.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Payload::Prompt(p) => vec![&mut p.tokens],
            Payload::Lora(l) => l.tensors_mut(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPayload {
        match self {
            Payload::Prompt(p) => BoundPayload::Prompt(tape.leaf(&p.tokens)),
            Payload::Lora(l) => BoundPayload::Lora(BoundLora {
                targets: l.targets.clone(),
                scaling: l.scaling(),
                pairs: l
                    .pairs
                    .iter()
                    .map(|layer| layer.iter().map(|p| (tape.leaf(&p.down), tape.leaf(&p.up))).collect())
                    .collect(),
            }),
        }
    }

    pub fn absorb(&mut self, bound: &BoundPayload, grads: &Gradients) -> Result<()> {
        match (self, bound) {
            (Payload::Prompt(p), BoundPayload::Prompt(v)) => grads.accumulate_into(*v, &mut p.tokens),
            (Payload::Lora(l), BoundPayload::Lora(b)) => {
                for (layer, bl) in l.pairs.iter_mut().zip(&b.pairs) {
                    for (pair, &(down, up)) in layer.iter_mut().zip(bl) {
                        grads.accumulate_into(down, &mut pair.down)?;
                        grads.accumulate_into(up, &mut pair.up)?;
                    }
                }
                Ok(())
            }
            _ => Err(Error::Contract("bound payload kind does not match adapter".into())),
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        match self {
            Payload::Prompt(p) => {
                ck.set_meta(&format!("{prefix}.kind"), "prompt");
                ck.push(format!("{prefix}.prompt"), &p.tokens);
            }
            Payload::Lora(l) => {
                ck.set_meta(&format!("{prefix}.kind"), "lora");
                ck.set_meta(&format!("{prefix}.rank"), l.rank);
                ck.set_meta(&format!("{prefix}.targets"), format_targets(&l.targets));
                ck.set_meta(&format!("{prefix}.alpha"), format!("{:e}", l.alpha));
                for (li, layer) in l.pairs.iter().enumerate() {
                    for (site, pair) in l.targets.iter().zip(layer) {
                        let c = site.as_char();
                        ck.push(format!("{prefix}.layer{li}.{c}.down"), &pair.down);
                        ck.push(format!("{prefix}.layer{li}.{c}.up"), &pair.up);
                    }
                }
            }
        }
    }

    pub fn load(ck: &Checkpoint, prefix: &str, cfg: &ViTConfig) -> Result<Self> {
        let kind = ck.meta(&format!("{prefix}.kind"))?;
        let d = cfg.hidden_dim;
        match AdapterKind::parse(kind) {
            Some(AdapterKind::Prompt) => {
                let tokens = ck.tensor(&format!("{prefix}.prompt"))?.clone();
                if tokens.shape().len() != 2 || tokens.shape()[1] != d {
                    return Err(Error::dim("load prompt", format!("prompt shape {:?}", tokens.shape())));
                }
                Ok(Payload::Prompt(PromptParams {
                    tokens: tokens.with_requires_grad(true),
                }))
            }
            Some(AdapterKind::Lora) => {
                let rank: usize = ck.meta_parse(&format!("{prefix}.rank"))?;
                let targets = parse_targets(ck.meta(&format!("{prefix}.targets"))?)?;
                let alpha: f64 = ck.meta_parse(&format!("{prefix}.alpha"))?;
                let mut pairs = Vec::with_capacity(cfg.num_layers);
                for li in 0..cfg.num_layers {
                    let mut layer = Vec::with_capacity(targets.len());
                    for site in &targets {
                        let c = site.as_char();
                        layer.push(LoraPair {
                            down: ck
                                .tensor_shaped(&format!("{prefix}.layer{li}.{c}.down"), &[d, rank])?
                                .with_requires_grad(true),
                            up: ck
                                .tensor_shaped(&format!("{prefix}.layer{li}.{c}.up"), &[rank, d])?
                                .with_requires_grad(true),
                        });
                    }
                    pairs.push(layer);
                }
                Ok(Payload::Lora(LoraParams {
                    rank,
                    targets,
                    alpha,
                    pairs,
                }))
            }
            None => Err(Error::Config(format!("unknown adapter kind `{kind}`"))),
        }
    }
}

impl AdapterSet {
    pub fn new(spec: &PeftSpec, cfg: &ViTConfig, head_classes: Option<usize>, seed: Seed, stream: StreamId) -> Result<Self> {
        let payload = spec.init(cfg, seed, stream.with(0))?;
        let head = head_classes.map(|c| Head::init(cfg.hidden_dim, c, seed, stream.with(1)));
        Ok(AdapterSet { payload, head })
    }

    pub fn kind(&self) -> AdapterKind {
        self.payload.kind()
    }

    pub fn param_count(&self) -> usize {
        self.payload.param_count() + self.head.as_ref().map_or(0, Head::param_count)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapter {
        BoundAdapter {
            payload: self.payload.bind(tape),
            head: self.head.as_ref().map(|h| h.bind(tape)),
        }
    }

    pub fn absorb(&mut self, bound: &BoundAdapter, grads: &Gradients) -> Result<()> {
        self.payload.absorb(&bound.payload, grads)?;
        if let (Some(h), Some(b)) = (&mut self.head, &bound.head) {
            h.absorb(b, grads)?;
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.payload.tensors_mut();
        if let Some(h) = &mut self.head {
            v.extend(h.tensors_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        self.payload.save(ck, prefix);
        if let Some(h) = &self.head {
            h.save(ck, &format!("{prefix}.head"));
        }
    }

    pub fn load(ck: &Checkpoint, prefix: &str, cfg: &ViTConfig) -> Result<Self> {
        let payload = Payload::load(ck, prefix, cfg)?;
        let head = if ck.tensor(&format!("{prefix}.head.bias")).is_ok() {
            Some(Head::load(ck, &format!("{prefix}.head"), cfg.hidden_dim)?)
        } else {
            None
        };
        Ok(AdapterSet { payload, head })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("adapter");
        self.save(&mut ck, "adapter");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ViTConfig) -> Result<Self> {
        ck.expect_kind("adapter")?;
        Self::load(ck, "adapter", cfg)
    }
}

/// How bound adapters modify one batch: prompt lists to prepend and low-rank increments.
#[derive(Debug, Clone, Default)]
pub struct Adaptation {
    prompts: Vec<Vec<Var>>,
    increments: Option<Increments>,
}

impl Adaptation {
    pub fn none() -> Self {
        Adaptation::default()
    }

    /// One adapter applied to every sample.
    pub fn single(payload: &BoundPayload, num_layers: usize) -> Self {
        match payload {
            BoundPayload::Prompt(p) => Adaptation {
                prompts: vec![vec![*p]],
                increments: None,
            },
            BoundPayload::Lora(l) => {
                let mut inc = Increments::new(num_layers);
                push_lora(&mut inc, l, None);
                Adaptation {
                    prompts: Vec::new(),
                    increments: Some(inc),
                }
            }
        }
    }

    /// Several LoRA adapters; `weights[s][i]` scales adapter `i` on sample `s`.
    pub fn lora_mixture(adapters: &[&BoundLora], weights: &[Vec<f64>], num_layers: usize) -> Result<Self> {
        let mut inc = Increments::new(num_layers);
        for (i, l) in adapters.iter().enumerate() {
            let w: Vec<f64> = weights
                .iter()
                .map(|row| {
                    row.get(i)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("no weight for adapter {i}")))
                })
                .collect::<Result<_>>()?;
            push_lora(&mut inc, l, Some(w));
        }
        Ok(Adaptation {
            prompts: Vec::new(),
            increments: Some(inc),
        })
    }

    /// Prompts per sample, stacked in list order (or one list shared by the whole batch).
    pub fn prompt_lists(lists: Vec<Vec<Var>>) -> Self {
        Adaptation {
            prompts: lists,
            increments: None,
        }
    }
}

fn push_lora(inc: &mut Increments, l: &BoundLora, weights: Option<Vec<f64>>) {
    for (layer, pairs) in l.pairs.iter().enumerate() {
        for (&site, &(down, up)) in l.targets.iter().zip(pairs) {
            inc.push(
                layer,
                site,
                LowRankTerm {
                    down,
                    up,
                    scale: l.scaling,
                    sample_weights: weights.clone(),
                },
            );
        }
    }
}

/// Class-token features `[batch, D]` of the adapted model.
pub fn adapted_features(
    tape: &mut Tape,
    cfg: &ViTConfig,
    vit: &BoundVit,
    images: &[&[f32]],
    adaptation: &Adaptation,
) -> Result<Var> {
    let mut seq = embed_images(tape, cfg, vit, images)?;
    if !adaptation.prompts.is_empty() {
        seq = prepend_prompts(tape, seq, &adaptation.prompts)?;
    }
    encode(tape, cfg, vit, &seq, adaptation.increments.as_ref())
}

/// Inference-only features for many images, in chunks, with an optional adapter.
pub fn features_with(
    cfg: &ViTConfig,
    params: &ViTParams,
    payload: Option<&Payload>,
    images: &[&[f32]],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    let mut tape = Tape::new();
    for batch in images.chunks(chunk.max(1)) {
        tape.reset();
        let vit = params.bind(&mut tape);
        let adaptation = match payload {
            Some(p) => {
                let bound = p.bind(&mut tape);
                Adaptation::single(&bound, cfg.num_layers)
            }
            None => Adaptation::none(),
        };
        let f = adapted_features(&mut tape, cfg, &vit, batch, &adaptation)?;
        out.extend(tape.value(f).chunks(cfg.hidden_dim).map(<[f64]>::to_vec));
    }
    Ok(out)
}
