use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::metrics::ConditionalAccuracy;
use crate::harness::objectives::{AdapterObjective, Targets};
use crate::harness::train::{fit, masked_argmax, StepLog, TrainConfig};
use crate::peft::{features_with, AdapterSet, Payload, PeftSpec};
use crate::rng::{Seed, StreamId};
use crate::tensor::Tensor;
use crate::vit::{Head, ViTConfig, ViTParams};

use super::kmeans::{kmeans, squared_distance, KMeansOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SxVariant {
    /// Embed with the model adapted to the first task instead of the plain backbone.
    pub plus_plus: bool,
    /// One head over all classes instead of a head per expert.
    pub shared_head: bool,
}

impl SxVariant {
    pub fn name(self) -> &'static str {
        match (self.plus_plus, self.shared_head) {
            (false, false) => "base",
            (true, false) => "plus_plus",
            (false, true) => "shared_head",
            (true, true) => "plus_plus_shared_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SxConfig {
    pub peft: PeftSpec,
    pub variant: SxVariant,
    pub clusters: usize,
    pub train: TrainConfig,
    pub kmeans: KMeansOptions,
    pub eval_chunk: usize,
}

/// The feature model used for prototypes and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extractor {
    Base,
    /// Backbone plus the adapter of this expert.
    Expert(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRegistry {
    pub variant: SxVariant,
    pub num_classes: usize,
    pub experts: Vec<AdapterSet>,
    /// Per task, its k centroids.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// Per task, the labels it introduced; column `i` of a per-expert head is `class_map[t][i]`.
    pub class_map: Vec<Vec<usize>>,
    pub extractor: Extractor,
    pub shared_head: Option<Head>,
}

/// How test samples reach an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    Selected,
    /// Every sample goes to this expert.
    Forced(usize),
}

impl ExpertRegistry {
    pub fn new(cfg: &ViTConfig, num_classes: usize, variant: SxVariant, seed: Seed) -> Self {
        ExpertRegistry {
            variant,
            num_classes,
            experts: Vec::new(),
            prototypes: Vec::new(),
            class_map: Vec::new(),
            extractor: Extractor::Base,
            shared_head: variant
                .shared_head
                .then(|| Head::init(cfg.hidden_dim, num_classes, seed, StreamId::named("sx-shared-head"))),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    fn extractor_payload(&self) -> Option<&Payload> {
        match self.extractor {
            Extractor::Base => None,
            Extractor::Expert(e) => Some(&self.experts[e].payload),
        }
    }

    /// Features of the registry's extractor for each image.
    pub fn embed(&self, cfg: &ViTConfig, base: &ViTParams, images: &[&[f32]], chunk: usize) -> Result<Vec<Vec<f64>>> {
        features_with(cfg, base, self.extractor_payload(), images, chunk)
    }

    /// Every label introduced so far, sorted.
    pub fn seen_classes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.class_map.iter().flatten().copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn trainable_param_count(&self) -> usize {
        self.experts.iter().map(AdapterSet::param_count).sum::<usize>()
            + self.shared_head.as_ref().map_or(0, Head::param_count)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("registry");
        ck.set_meta("plus_plus", self.variant.plus_plus);
        ck.set_meta("shared_head", self.variant.shared_head);
        ck.set_meta("num_classes", self.num_classes);
        ck.set_meta("tasks", self.experts.len());
        ck.set_meta(
            "extractor",
            match self.extractor {
                Extractor::Base => "base".to_string(),
                Extractor::Expert(e) => format!("expert{e}"),
            },
        );
        for (t, expert) in self.experts.iter().enumerate() {
            expert.save(&mut ck, &format!("expert{t}"));
            let classes: Vec<String> = self.class_map[t].iter().map(usize::to_string).collect();
            ck.set_meta(&format!("classes{t}"), classes.join(","));
            let rows: Vec<Vec<f64>> = self.prototypes[t].clone();
            ck.push(format!("prototypes{t}"), &Tensor::from_rows(&rows).expect("equal-width prototypes"));
        }
        if let Some(h) = &self.shared_head {
            h.save(&mut ck, "shared_head");
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ViTConfig) -> Result<Self> {
        ck.expect_kind("registry")?;
        let variant = SxVariant {
            plus_plus: ck.meta_parse("plus_plus")?,
            shared_head: ck.meta_parse("shared_head")?,
        };
        let tasks: usize = ck.meta_parse("tasks")?;
        let extractor = match ck.meta("extractor")? {
            "base" => Extractor::Base,
            other => Extractor::Expert(
                other
                    .strip_prefix("expert")
                    .and_then(|e| e.parse().ok())
                    .filter(|&e: &usize| e < tasks)
                    .ok_or_else(|| Error::Config(format!("bad extractor `{other}`")))?,
            ),
        };
        let mut reg = ExpertRegistry {
            variant,
            num_classes: ck.meta_parse("num_classes")?,
            experts: Vec::new(),
            prototypes: Vec::new(),
            class_map: Vec::new(),
            extractor,
            shared_head: None,
        };
        for t in 0..tasks {
            reg.experts.push(AdapterSet::load(ck, &format!("expert{t}"), cfg)?);
            let classes = ck.meta(&format!("classes{t}"))?;
            reg.class_map.push(
                classes
                    .split(',')
                    .map(|c| c.parse().map_err(|_| Error::Config(format!("bad class list `{classes}`"))))
                    .collect::<Result<_>>()?,
            );
            let p = ck.tensor(&format!("prototypes{t}"))?;
            reg.prototypes
                .push(p.data().chunks(cfg.hidden_dim).map(<[f64]>::to_vec).collect());
        }
        if variant.shared_head {
            reg.shared_head = Some(Head::load(ck, "shared_head", cfg.hidden_dim)?);
        }
        Ok(reg)
    }
}

/// Trains a new expert on one task and stores its prototypes.
pub fn sx_train_task(
    registry: &mut ExpertRegistry,
    data: &Dataset,
    classes: &[usize],
    cfg: &ViTConfig,
    base: &ViTParams,
    sx: &SxConfig,
    seed: Seed,
) -> Result<Vec<StepLog>> {
    if !base.backbone_frozen() {
        return Err(Error::Contract("expert training needs a frozen backbone".into()));
    }
    let t = registry.len();
    let stream = StreamId::named("sx-expert").with(t as u64);
    let head_classes = (!registry.variant.shared_head).then_some(classes.len());
    let mut expert = AdapterSet::new(&sx.peft, cfg, head_classes, seed, stream)?;
    let log = {
        let AdapterSet { payload, head } = &mut expert;
        let (head, targets) = match head {
            Some(h) => (h, Targets::local(data, classes)),
            None => (
                registry.shared_head.as_mut().expect("shared head exists"),
                Targets::global(data, registry.num_classes, Some(classes)),
            ),
        };
        let mut obj = AdapterObjective {
            cfg,
            base,
            data,
            payload: Some(payload),
            head,
            targets,
        };
        fit(&mut obj, &sx.train, seed, stream.with(1))?
    };
    registry.experts.push(expert);
    registry.class_map.push(classes.to_vec());
    if registry.variant.plus_plus && t == 0 {
        registry.extractor = Extractor::Expert(0);
    }
    let features = registry.embed(cfg, base, &data.all_refs(), sx.eval_chunk)?;
    let k = sx.clusters.min(features.len());
    let km = kmeans(&features, k, seed, StreamId::named("sx-kmeans").with(t as u64), sx.kmeans)?;
    registry.prototypes.push(km.centroids);
    Ok(log)
}

/// Owning task of the globally nearest prototype; ties go to the earliest task, then the lowest prototype.
pub fn select_expert(feature: &[f64], registry: &ExpertRegistry) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (t, group) in registry.prototypes.iter().enumerate() {
        for p in group {
            let d = squared_distance(feature, p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((t, d));
            }
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::Contract("no experts to select from".into()))
}

/// Per image, the routed expert and the predicted label.
pub fn sx_predict(
    registry: &ExpertRegistry,
    cfg: &ViTConfig,
    base: &ViTParams,
    images: &[&[f32]],
    routing: Routing,
    chunk: usize,
) -> Result<Vec<(usize, usize)>> {
    if registry.is_empty() {
        return Err(Error::Contract("no experts to predict with".into()));
    }
    let experts: Vec<usize> = match routing {
        Routing::Forced(e) if e < registry.len() => vec![e; images.len()],
        Routing::Forced(e) => return Err(Error::Contract(format!("expert {e} does not exist"))),
        Routing::Selected => registry
            .embed(cfg, base, images, chunk)?
            .iter()
            .map(|f| select_expert(f, registry))
            .collect::<Result<_>>()?,
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &e) in experts.iter().enumerate() {
        groups.entry(e).or_default().push(i);
    }
    let seen = registry.seen_classes();
    let seen_mask: Vec<bool> = (0..registry.num_classes).map(|c| seen.contains(&c)).collect();
    let mut labels = vec![0; images.len()];
    for (e, members) in groups {
        let expert = &registry.experts[e];
        let batch: Vec<&[f32]> = members.iter().map(|&i| images[i]).collect();
        let features = features_with(cfg, base, Some(&expert.payload), &batch, chunk)?;
        let head = expert
            .head
            .as_ref()
            .or(registry.shared_head.as_ref())
            .ok_or_else(|| Error::Contract("expert has no head".into()))?;
        for (&i, f) in members.iter().zip(&features) {
            let logits = head_logits(f, head);
            labels[i] = if expert.head.is_some() {
                registry.class_map[e][masked_argmax(&logits, None)]
            } else {
                masked_argmax(&logits, Some(&seen_mask))
            };
        }
    }
    Ok(experts.into_iter().zip(labels).collect())
}

fn head_logits(features: &[f64], head: &Head) -> Vec<f64> {
    let c = head.classes();
    let mut out = head.bias.data().to_vec();
    for (d, &f) in features.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&head.weight.data()[d * c..(d + 1) * c]) {
            *o += f * w;
        }
    }
    out
}

/// Prediction accuracy on one task's test set, split by whether routing found the task's own expert.
pub fn sx_evaluate(
    registry: &ExpertRegistry,
    cfg: &ViTConfig,
    base: &ViTParams,
    test: &Dataset,
    task: usize,
    routing: Routing,
    chunk: usize,
) -> Result<ConditionalAccuracy> {
    let preds = sx_predict(registry, cfg, base, &test.all_refs(), routing, chunk)?;
    let mut acc = ConditionalAccuracy::default();
    for ((e, label), &truth) in preds.into_iter().zip(&test.labels) {
        acc.record(e == task, label == truth);
    }
    Ok(acc)
}

/// Fraction of samples whose selected expert is their own task's.
pub fn expert_selection_accuracy(
    registry: &ExpertRegistry,
    cfg: &ViTConfig,
    base: &ViTParams,
    tests: &[(&Dataset, usize)],
    chunk: usize,
) -> Result<f64> {
    let mut right = 0usize;
    let mut total = 0usize;
    for (ds, task) in tests {
        for f in registry.embed(cfg, base, &ds.all_refs(), chunk)? {
            right += usize::from(select_expert(&f, registry)? == *task);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Undefined("selection accuracy of empty test sets".into()));
    }
    Ok(right as f64 / total as f64)
}
