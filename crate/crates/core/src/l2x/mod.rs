//! A shared pool of adapters retrieved per input by key similarity, with one
//! classifier head across tasks.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::train::{fit, masked_argmax, Objective, StepLog, StepOutput, TrainConfig};
use crate::peft::{adapted_features, Adaptation, AdapterKind, BoundLora, BoundPayload, Payload, PeftSpec};
use crate::rng::{Seed, StreamId};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::vit::{classify_batch, extract_features, BoundHead, Head, ViTConfig, ViTParams};

/// How the key-matching term enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    /// `lambda * sum(1 - cos)`: pulls selected keys toward their queries.
    OneMinusCos,
    /// `lambda * sum(cos)`, added as is.
    RawGamma,
}

impl Surrogate {
    pub fn as_str(self) -> &'static str {
        match self {
            Surrogate::OneMinusCos => "one_minus_cos",
            Surrogate::RawGamma => "raw_gamma",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one_minus_cos" => Some(Surrogate::OneMinusCos),
            "raw_gamma" => Some(Surrogate::RawGamma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2xConfig {
    pub peft: PeftSpec,
    pub pool_size: usize,
    pub select_count: usize,
    pub lambda: f64,
    pub surrogate: Surrogate,
    pub train: TrainConfig,
    pub eval_chunk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPool {
    pub modules: Vec<Payload>,
    /// One `[1, D]` key per module, each its own tensor so unselected keys receive no update.
    pub keys: Vec<Tensor>,
    pub head: Head,
    pub select_count: usize,
    pub lambda: f64,
    pub surrogate: Surrogate,
    /// Every label trained so far, sorted.
    pub seen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected modules by descending score; ties go to the lower index.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// A pool of `pool_size` fresh modules with unit-norm Gaussian keys and a head over all classes.
pub fn init_pool(cfg: &ViTConfig, l2x: &L2xConfig, num_classes: usize, seed: Seed) -> Result<AdapterPool> {
    if l2x.pool_size == 0 {
        return Err(Error::Config("pool_size must be at least 1".into()));
    }
    if l2x.select_count == 0 || l2x.select_count > l2x.pool_size {
        return Err(Error::Config(format!(
            "select_count {} must lie in 1..={}",
            l2x.select_count, l2x.pool_size
        )));
    }
    let base = StreamId::named("l2x-pool");
    let modules = (0..l2x.pool_size)
        .map(|i| l2x.peft.init(cfg, seed, base.with(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seed.stream(StreamId::named("l2x-keys"));
    let keys = (0..l2x.pool_size)
        .map(|_| {
            let mut k = Tensor::randn(&[1, cfg.hidden_dim], 1.0, &mut rng);
            let norm = k.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in k.data_mut() {
                *v /= norm;
            }
            k.with_requires_grad(true)
        })
        .collect();
    Ok(AdapterPool {
        modules,
        keys,
        head: Head::init(cfg.hidden_dim, num_classes, seed, StreamId::named("l2x-head")),
        select_count: l2x.select_count,
        lambda: l2x.lambda,
        surrogate: l2x.surrogate,
        seen: Vec::new(),
    })
}

/// Cosine similarity of the query with every key.
pub fn score_keys(query: &[f64], keys: &[Tensor]) -> Result<Vec<f64>> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::NonFinite { op: "score_keys" });
    }
    keys.iter()
        .map(|k| {
            if k.numel() != query.len() {
                return Err(Error::dim("score_keys", format!("key {} vs query {}", k.numel(), query.len())));
            }
            let kn = k.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if kn == 0.0 {
                return Err(Error::NonFinite { op: "score_keys" });
            }
            let dot: f64 = k.data().iter().zip(query).map(|(a, b)| a * b).sum();
            Ok(dot / (qn * kn))
        })
        .collect()
}

/// The `n` highest scores, descending, ties to the lower index.
pub fn select_top_n(scores: &[f64], n: usize) -> Result<SelectionResult> {
    if n > scores.len() {
        return Err(Error::Config(format!("cannot select {n} of {} modules", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(SelectionResult {
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

impl AdapterPool {
    pub fn kind(&self) -> AdapterKind {
        self.modules[0].kind()
    }

    pub fn select(&self, query: &[f64]) -> Result<SelectionResult> {
        select_top_n(&score_keys(query, &self.keys)?, self.select_count)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.modules.iter().map(Payload::param_count).sum::<usize>()
            + self.keys.iter().map(Tensor::numel).sum::<usize>()
            + self.head.param_count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("pool");
        ck.set_meta("pool_size", self.modules.len());
        ck.set_meta("select_count", self.select_count);
        ck.set_meta("lambda", format!("{:e}", self.lambda));
        ck.set_meta("surrogate", self.surrogate.as_str());
        let seen: Vec<String> = self.seen.iter().map(usize::to_string).collect();
        ck.set_meta("seen", seen.join(","));
        for (i, (m, k)) in self.modules.iter().zip(&self.keys).enumerate() {
            m.save(&mut ck, &format!("module{i}"));
            ck.push(format!("key{i}"), k);
        }
        self.head.save(&mut ck, "head");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ViTConfig) -> Result<Self> {
        ck.expect_kind("pool")?;
        let m: usize = ck.meta_parse("pool_size")?;
        let seen = ck.meta("seen")?;
        let surrogate = ck.meta("surrogate")?;
        let mut modules = Vec::with_capacity(m);
        let mut keys = Vec::with_capacity(m);
        for i in 0..m {
            modules.push(Payload::load(ck, &format!("module{i}"), cfg)?);
            keys.push(
                ck.tensor_shaped(&format!("key{i}"), &[1, cfg.hidden_dim])?
                    .with_requires_grad(true),
            );
        }
        Ok(AdapterPool {
            modules,
            keys,
            head: Head::load(ck, "head", cfg.hidden_dim)?,
            select_count: ck.meta_parse("select_count")?,
            lambda: ck.meta_parse("lambda")?,
            surrogate: Surrogate::parse(surrogate)
                .ok_or_else(|| Error::Config(format!("unknown surrogate `{surrogate}`")))?,
            seen: if seen.is_empty() {
                Vec::new()
            } else {
                seen.split(',')
                    .map(|c| c.parse().map_err(|_| Error::Config(format!("bad class list `{seen}`"))))
                    .collect::<Result<_>>()?
            },
        })
    }
}

/// Pool modules used by a batch and the per-sample adaptation they produce.
pub struct BoundSelection {
    /// `(module index, bound payload)` for every module some sample selected.
    pub modules: Vec<(usize, BoundPayload)>,
    pub adaptation: Adaptation,
}

/// Binds the selected modules and builds the per-sample prompt lists or LoRA mixture.
pub fn bind_selection(
    tape: &mut Tape,
    cfg: &ViTConfig,
    pool: &AdapterPool,
    selections: &[SelectionResult],
) -> Result<BoundSelection> {
    let mut used: Vec<usize> = selections.iter().flat_map(|s| s.indices.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let modules: Vec<(usize, BoundPayload)> = used.iter().map(|&i| (i, pool.modules[i].bind(tape))).collect();
    let slot = |i: usize| used.binary_search(&i).expect("selected module is bound");
    let adaptation = match pool.kind() {
        AdapterKind::Prompt => Adaptation::prompt_lists(
            selections
                .iter()
                .map(|s| {
                    s.indices
                        .iter()
                        .map(|&i| match &modules[slot(i)].1 {
                            BoundPayload::Prompt(v) => *v,
                            BoundPayload::Lora(_) => unreachable!("pool kinds are uniform"),
                        })
                        .collect()
                })
                .collect(),
        ),
        AdapterKind::Lora => {
            let loras: Vec<&BoundLora> = modules
                .iter()
                .map(|(_, b)| match b {
                    BoundPayload::Lora(l) => l,
                    BoundPayload::Prompt(_) => unreachable!("pool kinds are uniform"),
                })
                .collect();
            let weights: Vec<Vec<f64>> = selections
                .iter()
                .map(|s| {
                    let mut w = vec![0.0; used.len()];
                    for &i in &s.indices {
                        w[slot(i)] = 1.0;
                    }
                    w
                })
                .collect();
            Adaptation::lora_mixture(&loras, &weights, cfg.num_layers)?
        }
    };
    Ok(BoundSelection { modules, adaptation })
}

/// Shared-head logits `[batch, C]` for images under their selections.
pub fn l2x_forward(
    tape: &mut Tape,
    cfg: &ViTConfig,
    base: &ViTParams,
    pool: &AdapterPool,
    images: &[&[f32]],
    selections: &[SelectionResult],
) -> Result<(Var, BoundSelection, BoundHead)> {
    let vit = base.bind(tape);
    let sel = bind_selection(tape, cfg, pool, selections)?;
    let head = pool.head.bind(tape);
    let f = adapted_features(tape, cfg, &vit, images, &sel.adaptation)?;
    let logits = classify_batch(tape, f, &head)?;
    Ok((logits, sel, head))
}

/// The key-matching term for a batch, averaged over samples.
/// `key_vars` pairs each bound key with its module index; every selected module must appear.
pub fn surrogate_term(
    tape: &mut Tape,
    pool: &AdapterPool,
    key_vars: &[(usize, Var)],
    queries: &[Vec<f64>],
    selections: &[SelectionResult],
) -> Result<Var> {
    let d = pool.keys[0].numel();
    let mut q = Vec::new();
    let mut index = Vec::new();
    for (query, s) in queries.iter().zip(selections) {
        for &i in &s.indices {
            let slot = key_vars
                .iter()
                .position(|&(m, _)| m == i)
                .ok_or_else(|| Error::Config(format!("key {i} is selected but not bound")))?;
            q.extend_from_slice(query);
            index.extend((0..d).map(|j| (slot as u32, j as u32)));
        }
    }
    let key_vars: Vec<Var> = key_vars.iter().map(|&(_, v)| v).collect();
    let rows = index.len() / d;
    let keys = tape.gather(&key_vars, index, vec![rows, d])?;
    let q = tape.constant(vec![rows, d], q)?;
    let cos = tape.cosine_rows(q, keys)?;
    let total = tape.sum(cos);
    let b = queries.len() as f64;
    Ok(match pool.surrogate {
        Surrogate::OneMinusCos => {
            let neg = tape.scale(total, -pool.lambda / b);
            tape.add_scalar(neg, pool.lambda * rows as f64 / b)
        }
        Surrogate::RawGamma => tape.scale(total, pool.lambda / b),
    })
}

/// Frozen-backbone query features, one per sample; these never carry gradient.
pub fn query_features(cfg: &ViTConfig, base: &ViTParams, data: &Dataset, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let refs = data.all_refs();
    for batch in refs.chunks(chunk.max(1)) {
        out.extend(extract_features(cfg, base, batch)?);
    }
    Ok(out)
}

pub struct L2xObjective<'a> {
    pub cfg: &'a ViTConfig,
    pub base: &'a ViTParams,
    pub data: &'a Dataset,
    pub pool: &'a mut AdapterPool,
    pub queries: &'a [Vec<f64>],
    /// Logit columns eligible in the loss; all when `None`.
    pub mask: Option<Vec<bool>>,
}

pub struct L2xBound {
    modules: Vec<(usize, BoundPayload)>,
    keys: Vec<(usize, Var)>,
    head: BoundHead,
}

impl L2xObjective<'_> {
    /// Cross-entropy plus the weighted key-matching term for one batch.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, L2xBound)> {
        let queries: Vec<Vec<f64>> = batch.iter().map(|&i| self.queries[i].clone()).collect();
        let selections = queries.iter().map(|q| self.pool.select(q)).collect::<Result<Vec<_>>>()?;
        let images = self.data.image_refs(batch);
        let (logits, sel, head) = l2x_forward(tape, self.cfg, self.base, self.pool, &images, &selections)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
        let mask = self.mask.clone().unwrap_or_else(|| vec![true; self.pool.head.classes()]);
        let ce = tape.cross_entropy_masked(logits, &targets, &mask)?;
        // only selected keys join the graph, so the rest get no gradient at all
        let mut used: Vec<usize> = selections.iter().flat_map(|s| s.indices.iter().copied()).collect();
        used.sort_unstable();
        used.dedup();
        let keys: Vec<(usize, Var)> = used.iter().map(|&i| (i, tape.leaf(&self.pool.keys[i]))).collect();
        let loss = if self.pool.lambda != 0.0 {
            let s = surrogate_term(tape, self.pool, &keys, &queries, &selections)?;
            tape.add(ce, s)?
        } else {
            ce
        };
        Ok((
            StepOutput {
                loss,
                logits,
                targets,
                mask: self.mask.clone(),
            },
            L2xBound {
                modules: sel.modules,
                keys,
                head,
            },
        ))
    }
}

impl Objective for L2xObjective<'_> {
    type Bound = L2xBound;

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn build(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, L2xBound)> {
        self.batch_loss(tape, batch)
    }

    fn absorb(&mut self, bound: &L2xBound, grads: &Gradients) -> Result<()> {
        for (i, b) in &bound.modules {
            self.pool.modules[*i].absorb(b, grads)?;
        }
        for &(i, v) in &bound.keys {
            grads.accumulate_into(v, &mut self.pool.keys[i])?;
        }
        self.pool.head.absorb(&bound.head, grads)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let AdapterPool { modules, keys, head, .. } = &mut *self.pool;
        let mut v: Vec<&mut Tensor> = modules.iter_mut().flat_map(Payload::tensors_mut).collect();
        v.extend(keys.iter_mut());
        v.extend(head.tensors_mut());
        v
    }
}

/// Trains the pool on one task; in class-incremental streams the loss sees only that task's classes.
pub fn l2x_train_task(
    pool: &mut AdapterPool,
    data: &Dataset,
    classes: &[usize],
    mask_absent: bool,
    cfg: &ViTConfig,
    base: &ViTParams,
    l2x: &L2xConfig,
    seed: Seed,
    task: usize,
) -> Result<Vec<StepLog>> {
    if !base.backbone_frozen() {
        return Err(Error::Contract("pool training needs a frozen backbone".into()));
    }
    let queries = query_features(cfg, base, data, l2x.eval_chunk)?;
    let num_classes = pool.head.classes();
    let mask = mask_absent.then(|| (0..num_classes).map(|c| classes.contains(&c)).collect());
    let log = {
        let mut obj = L2xObjective {
            cfg,
            base,
            data,
            pool: &mut *pool,
            queries: &queries,
            mask,
        };
        fit(&mut obj, &l2x.train, seed, StreamId::named("l2x-train").with(task as u64))?
    };
    pool.seen.extend_from_slice(classes);
    pool.seen.sort_unstable();
    pool.seen.dedup();
    Ok(log)
}

/// Labels for a batch: per-input selection, adapted forward, argmax over seen classes.
pub fn l2x_predict(
    pool: &AdapterPool,
    cfg: &ViTConfig,
    base: &ViTParams,
    images: &[&[f32]],
    chunk: usize,
) -> Result<Vec<usize>> {
    let seen_mask: Vec<bool> = (0..pool.head.classes()).map(|c| pool.seen.contains(&c)).collect();
    let mut labels = Vec::with_capacity(images.len());
    let mut tape = Tape::new();
    for batch in images.chunks(chunk.max(1)) {
        let queries = extract_features(cfg, base, batch)?;
        let selections = queries.iter().map(|q| pool.select(q)).collect::<Result<Vec<_>>>()?;
        tape.reset();
        let (logits, _, _) = l2x_forward(&mut tape, cfg, base, pool, batch, &selections)?;
        let c = pool.head.classes();
        labels.extend(tape.value(logits).chunks(c).map(|row| masked_argmax(row, Some(&seen_mask))));
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_extremes() {
        let keys = vec![
            Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![-3.0, 0.0]).unwrap(),
        ];
        let s = score_keys(&[1.0, 0.0], &keys).unwrap();
        assert_eq!(s, vec![1.0, 0.0, -1.0]);
        assert!(score_keys(&[0.0, 0.0], &keys).is_err());
    }

    #[test]
    fn top_n_order_and_ties() {
        let r = select_top_n(&[-1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(r.indices, vec![2, 1]);
        assert_eq!(r.scores, vec![1.0, 0.0]);
        let r = select_top_n(&[0.5, 0.7, 0.5, 0.7], 3).unwrap();
        assert_eq!(r.indices, vec![1, 3, 0]);
        assert_eq!(select_top_n(&[0.1, 0.3], 2).unwrap().indices, vec![1, 0]);
        assert!(select_top_n(&[0.1], 2).is_err());
    }
}
