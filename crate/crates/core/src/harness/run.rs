//! Method runners: backbone pretraining, continual-learning scenarios and joint training.

use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::l2x::{l2x_predict, l2x_train_task, init_pool, AdapterPool, L2xConfig, Surrogate};
use crate::peft::{features_with, AdapterKind, AdapterSet, PeftSpec};
use crate::rng::{Seed, StreamId};
use crate::sx::{sx_evaluate, sx_train_task, ExpertRegistry, KMeansOptions, Routing, SxConfig, SxVariant};
use crate::vit::{Head, ProjectionSite, ViTConfig, ViTParams};

use super::data::{concat, Dataset};
use super::metrics::{backward_transfer, forgetting, AccuracyMatrix, ConditionalAccuracy, Tally};
use super::objectives::{evaluate_objective, AdapterObjective, FullObjective, Targets};
use super::stream::{Scenario, Task};
use super::train::{fit, masked_argmax, OptimizerName, StepLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Finetune,
    SPrompts,
    SLora,
    L2p,
    L2l,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::SPrompts, Method::SLora, Method::L2p, Method::L2l];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::SPrompts => "s_prompts",
            Method::SLora => "s_lora",
            Method::L2p => "l2p",
            Method::L2l => "l2l",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// The PEFT kind a method trains, if any.
    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::Finetune => None,
            Method::SPrompts | Method::L2p => Some(AdapterKind::Prompt),
            Method::SLora | Method::L2l => Some(AdapterKind::Lora),
        }
    }

    pub fn is_sx(self) -> bool {
        matches!(self, Method::SPrompts | Method::SLora)
    }

    pub fn is_l2x(self) -> bool {
        matches!(self, Method::L2p | Method::L2l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Variant {
    pub sx: SxVariant,
    /// Evaluate every test set through its own task's expert.
    pub forced_routing: bool,
}

impl Variant {
    pub fn name(self) -> String {
        let base = self.sx.name();
        if self.forced_routing {
            if base == "base" {
                "forced".into()
            } else {
                format!("{base}_forced")
            }
        } else {
            base.into()
        }
    }
}

/// Joint-training modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMode {
    Prompt,
    Lora,
    Full,
}

impl JointMode {
    pub fn as_str(self) -> &'static str {
        match self {
            JointMode::Prompt => "joint_prompt",
            JointMode::Lora => "joint_lora",
            JointMode::Full => "joint_full",
        }
    }
}

/// Every hyperparameter a run needs besides the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub model: ViTConfig,
    pub prompt_length: usize,
    pub lora_rank: usize,
    pub lora_targets: Vec<ProjectionSite>,
    pub lora_alpha: Option<f64>,
    /// Prototypes per task; the scenario rule applies when unset.
    pub clusters: Option<usize>,
    pub kmeans: KMeansOptions,
    pub pool_size: usize,
    pub select_count: usize,
    pub lambda: f64,
    pub surrogate: Surrogate,
    pub pretrain: TrainConfig,
    pub sx_train: TrainConfig,
    pub l2p_train: TrainConfig,
    pub l2l_train: TrainConfig,
    pub finetune_train: TrainConfig,
    pub joint_train: TrainConfig,
    pub eval_chunk: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        let sx = TrainConfig {
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerName::Sgd,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 2e-4,
            cosine: true,
            eta_min: 0.0,
        };
        let l2p = TrainConfig {
            epochs: 5,
            batch_size: 16,
            optimizer: OptimizerName::AdamW,
            lr: 0.001875,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: false,
            eta_min: 0.0,
        };
        let l2l = TrainConfig {
            optimizer: OptimizerName::Sgd,
            ..l2p.clone()
        };
        RunSettings {
            model: ViTConfig::default().conventional(),
            prompt_length: 10,
            lora_rank: 1,
            lora_targets: vec![ProjectionSite::Query, ProjectionSite::Value],
            lora_alpha: None,
            clusters: None,
            kmeans: KMeansOptions::default(),
            pool_size: 10,
            select_count: 5,
            lambda: 0.1,
            surrogate: Surrogate::OneMinusCos,
            pretrain: TrainConfig {
                epochs: 20,
                lr: 0.01,
                ..sx.clone()
            },
            finetune_train: sx.clone(),
            joint_train: sx.clone(),
            sx_train: sx,
            l2p_train: l2p,
            l2l_train: l2l,
            eval_chunk: 64,
        }
    }
}

impl RunSettings {
    pub fn peft_spec(&self, kind: AdapterKind) -> PeftSpec {
        match kind {
            AdapterKind::Prompt => PeftSpec::Prompt {
                length: self.prompt_length,
            },
            AdapterKind::Lora => PeftSpec::Lora {
                rank: self.lora_rank,
                targets: self.lora_targets.clone(),
                alpha: self.lora_alpha,
            },
        }
    }

    /// Five prototypes per domain, or two per new class.
    pub fn clusters_for(&self, scenario: Scenario, new_classes: usize) -> usize {
        self.clusters.unwrap_or(match scenario {
            Scenario::Dil => 5,
            Scenario::Cil => 2 * new_classes,
        })
    }

    pub fn sx_config(&self, kind: AdapterKind, variant: SxVariant, clusters: usize) -> SxConfig {
        SxConfig {
            peft: self.peft_spec(kind),
            variant,
            clusters,
            train: self.sx_train.clone(),
            kmeans: self.kmeans,
            eval_chunk: self.eval_chunk,
        }
    }

    pub fn l2x_config(&self, kind: AdapterKind) -> L2xConfig {
        L2xConfig {
            peft: self.peft_spec(kind),
            pool_size: self.pool_size,
            select_count: self.select_count,
            lambda: self.lambda,
            surrogate: self.surrogate,
            train: match kind {
                AdapterKind::Prompt => self.l2p_train.clone(),
                AdapterKind::Lora => self.l2l_train.clone(),
            },
            eval_chunk: self.eval_chunk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for t in [
            &self.pretrain,
            &self.sx_train,
            &self.l2p_train,
            &self.l2l_train,
            &self.finetune_train,
            &self.joint_train,
        ] {
            t.validate()?;
        }
        if self.prompt_length == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if self.select_count == 0 || self.select_count > self.pool_size {
            return Err(Error::Config(format!(
                "select_count {} must lie in 1..={}",
                self.select_count, self.pool_size
            )));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        Ok(())
    }
}

/// One point of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

fn curve_from(log: &[StepLog], offset: usize, split: &str) -> Vec<CurvePoint> {
    log.iter()
        .map(|s| CurvePoint {
            step: offset + s.step,
            split: split.to_string(),
            loss: s.loss,
            accuracy: s.accuracy,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: u64,
    pub task_seconds: Vec<f64>,
    pub matrix: AccuracyMatrix,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
    pub backward_transfer: Option<f64>,
    pub expert_selection_accuracy: Option<f64>,
    pub conditional: Option<ConditionalAccuracy>,
    pub trainable_params: usize,
    pub final_train_loss: Option<f64>,
    pub loss_curve: Vec<CurvePoint>,
}

impl RunRecord {
    /// The record with wall-clock measurements cleared.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            task_seconds: Vec::new(),
            ..self.clone()
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.avg_accuracy = self.matrix.final_average()?;
        let full = (0..self.matrix.tasks()).all(|i| (0..=i).all(|j| self.matrix.get(i, j).is_some()));
        if full && self.matrix.tasks() >= 2 {
            self.forgetting = Some(forgetting(&self.matrix)?);
            self.backward_transfer = Some(backward_transfer(&self.matrix)?);
        }
        Ok(())
    }
}

/// What a scenario run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedState {
    Registry(ExpertRegistry),
    Pool(AdapterPool),
    Finetuned(ViTParams),
}

/// Fits a fresh backbone on the pretext data, then freezes it.
pub fn pretrain(settings: &RunSettings, pretext: &Dataset, num_classes: usize, seed: Seed) -> Result<(ViTParams, Vec<StepLog>)> {
    let cfg = &settings.model;
    let mut params = ViTParams::init(cfg, seed)?;
    params.head = Head::init(cfg.hidden_dim, num_classes, seed, StreamId::named("pretext-head"));
    let log = {
        let mut obj = FullObjective {
            cfg,
            params: &mut params,
            data: pretext,
            targets: Targets::global(pretext, num_classes, None),
        };
        fit(&mut obj, &settings.pretrain, seed, StreamId::named("pretrain"))?
    };
    params.set_backbone_trainable(false);
    params.zero_grad();
    Ok((params, log))
}

fn head_predict(cfg: &ViTConfig, params: &ViTParams, payload: Option<&crate::peft::Payload>, head: &Head, seen: &[usize], test: &Dataset, chunk: usize) -> Result<Tally> {
    let features = features_with(cfg, params, payload, &test.all_refs(), chunk)?;
    let c = head.classes();
    let mask: Vec<bool> = (0..c).map(|k| seen.contains(&k)).collect();
    let mut tally = Tally::default();
    for (f, &label) in features.iter().zip(&test.labels) {
        let mut logits = head.bias.data().to_vec();
        for (d, &v) in f.iter().enumerate() {
            for (o, w) in logits.iter_mut().zip(&head.weight.data()[d * c..(d + 1) * c]) {
                *o += v * w;
            }
        }
        tally.add(masked_argmax(&logits, Some(&mask)) == label);
    }
    Ok(tally)
}

fn eval_registry(
    registry: &ExpertRegistry,
    variant: Variant,
    cfg: &ViTConfig,
    base: &ViTParams,
    test: &Dataset,
    task: usize,
    chunk: usize,
) -> Result<ConditionalAccuracy> {
    let routing = if variant.forced_routing {
        Routing::Forced(task)
    } else {
        Routing::Selected
    };
    sx_evaluate(registry, cfg, base, test, task, routing, chunk)
}

fn eval_pool(pool: &AdapterPool, cfg: &ViTConfig, base: &ViTParams, test: &Dataset, chunk: usize) -> Result<Tally> {
    let preds = l2x_predict(pool, cfg, base, &test.all_refs(), chunk)?;
    let mut tally = Tally::default();
    for (p, l) in preds.iter().zip(&test.labels) {
        tally.add(p == l);
    }
    Ok(tally)
}

impl TrainedState {
    pub fn to_checkpoint(&self, cfg: &ViTConfig) -> Checkpoint {
        match self {
            TrainedState::Registry(r) => r.to_checkpoint(),
            TrainedState::Pool(p) => p.to_checkpoint(),
            TrainedState::Finetuned(p) => p.to_checkpoint(cfg),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ViTConfig) -> Result<Self> {
        match ck.kind.as_str() {
            "registry" => Ok(TrainedState::Registry(ExpertRegistry::from_checkpoint(ck, cfg)?)),
            "pool" => Ok(TrainedState::Pool(AdapterPool::from_checkpoint(ck, cfg)?)),
            "vit" => Ok(TrainedState::Finetuned(ViTParams::from_checkpoint(ck, cfg)?)),
            k => Err(Error::Config(format!("`{k}` checkpoints hold no trained method"))),
        }
    }

    /// Accuracy of the final predictor on every task's test set, as in the last matrix row.
    pub fn evaluate(&self, variant: Variant, cfg: &ViTConfig, base: &ViTParams, tasks: &[Task], chunk: usize) -> Result<Vec<Tally>> {
        let seen: Vec<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        tasks
            .iter()
            .map(|t| match self {
                TrainedState::Finetuned(p) => head_predict(cfg, p, None, &p.head, &seen, &t.test, chunk),
                TrainedState::Registry(r) => Ok(eval_registry(r, variant, cfg, base, &t.test, t.index, chunk)?.overall),
                TrainedState::Pool(p) => eval_pool(p, cfg, base, &t.test, chunk),
            })
            .collect()
    }
}

fn new_record(method: &str, variant: String, seed: Seed, tasks: &[Task]) -> RunRecord {
    RunRecord {
        method: method.to_string(),
        variant,
        seed: seed.0,
        config_hash: 0,
        task_seconds: Vec::new(),
        matrix: AccuracyMatrix::new(tasks.iter().map(|t| t.test.len()).collect()),
        avg_accuracy: 0.0,
        forgetting: None,
        backward_transfer: None,
        expert_selection_accuracy: None,
        conditional: None,
        trainable_params: 0,
        final_train_loss: None,
        loss_curve: Vec::new(),
    }
}

/// Trains `method` through the stream, evaluating every seen task after each one.
pub fn run_scenario(
    method: Method,
    variant: Variant,
    scenario: Scenario,
    num_classes: usize,
    tasks: &[Task],
    base: &ViTParams,
    settings: &RunSettings,
    seed: Seed,
) -> Result<(RunRecord, TrainedState)> {
    settings.validate()?;
    if tasks.is_empty() {
        return Err(Error::Stream("stream has no tasks".into()));
    }
    if !method.is_sx() && variant != Variant::default() {
        return Err(Error::Config(format!("{} has no variants", method.as_str())));
    }
    let cfg = &settings.model;
    let chunk = settings.eval_chunk;
    let mut rec = new_record(method.as_str(), variant.name(), seed, tasks);
    let mut seen: Vec<usize> = Vec::new();
    let state = match method {
        Method::Finetune => {
            let mut params = base.clone();
            params.set_backbone_trainable(true);
            params.head = Head::init(cfg.hidden_dim, num_classes, seed, StreamId::named("finetune-head"));
            for task in tasks {
                let start = Instant::now();
                let log = {
                    let mut obj = FullObjective {
                        cfg,
                        params: &mut params,
                        data: &task.train,
                        targets: Targets::global(&task.train, num_classes, None),
                    };
                    fit(&mut obj, &settings.finetune_train, seed, StreamId::named("finetune").with(task.index as u64))?
                };
                rec.loss_curve.extend(curve_from(&log, rec.loss_curve.len(), "train"));
                seen.extend(&task.classes);
                for j in 0..=task.index {
                    let tally = head_predict(cfg, &params, None, &params.head, &seen, &tasks[j].test, chunk)?;
                    rec.matrix.set(task.index, j, tally)?;
                }
                rec.task_seconds.push(start.elapsed().as_secs_f64());
            }
            rec.trainable_params = params.backbone_param_count() + params.head.param_count();
            TrainedState::Finetuned(params)
        }
        Method::SPrompts | Method::SLora => {
            let kind = method.adapter_kind().expect("S-X methods adapt");
            let mut registry = ExpertRegistry::new(cfg, num_classes, variant.sx, seed);
            let mut last_row = ConditionalAccuracy::default();
            for task in tasks {
                let start = Instant::now();
                let sx = settings.sx_config(kind, variant.sx, settings.clusters_for(scenario, task.classes.len()));
                let log = sx_train_task(&mut registry, &task.train, &task.classes, cfg, base, &sx, seed)?;
                rec.loss_curve.extend(curve_from(&log, rec.loss_curve.len(), "train"));
                last_row = ConditionalAccuracy::default();
                for j in 0..=task.index {
                    let c = eval_registry(&registry, variant, cfg, base, &tasks[j].test, j, chunk)?;
                    rec.matrix.set(task.index, j, c.overall)?;
                    last_row.merge(&c);
                }
                rec.task_seconds.push(start.elapsed().as_secs_f64());
            }
            if !variant.forced_routing {
                rec.expert_selection_accuracy = last_row.selection_accuracy();
                rec.conditional = Some(last_row);
            }
            rec.trainable_params = registry.trainable_param_count();
            TrainedState::Registry(registry)
        }
        Method::L2p | Method::L2l => {
            let kind = method.adapter_kind().expect("L2X methods adapt");
            let l2x = settings.l2x_config(kind);
            let mut pool = init_pool(cfg, &l2x, num_classes, seed)?;
            for task in tasks {
                let start = Instant::now();
                let log = l2x_train_task(
                    &mut pool,
                    &task.train,
                    &task.classes,
                    scenario == Scenario::Cil,
                    cfg,
                    base,
                    &l2x,
                    seed,
                    task.index,
                )?;
                rec.loss_curve.extend(curve_from(&log, rec.loss_curve.len(), "train"));
                for j in 0..=task.index {
                    rec.matrix.set(task.index, j, eval_pool(&pool, cfg, base, &tasks[j].test, chunk)?)?;
                }
                rec.task_seconds.push(start.elapsed().as_secs_f64());
            }
            rec.trainable_params = pool.trainable_param_count();
            TrainedState::Pool(pool)
        }
    };
    rec.finish()?;
    Ok((rec, state))
}

/// One training run on the union of the given tasks; only the last matrix row is filled.
pub fn joint_train(
    mode: JointMode,
    num_classes: usize,
    tasks: &[Task],
    base: &ViTParams,
    settings: &RunSettings,
    seed: Seed,
) -> Result<RunRecord> {
    settings.validate()?;
    let cfg = &settings.model;
    let parts: Vec<&Dataset> = tasks.iter().map(|t| &t.train).collect();
    let union = concat(&parts)?;
    let targets = Targets::global(&union, num_classes, None);
    let mut seen: Vec<usize> = union.label_set();
    seen.dedup();
    let stream = StreamId::named("joint").with(mode as u64);
    let mut rec = new_record(mode.as_str(), "base".into(), seed, tasks);
    let start = Instant::now();
    let last = tasks.len() - 1;
    match mode {
        JointMode::Prompt | JointMode::Lora => {
            let kind = if mode == JointMode::Prompt {
                AdapterKind::Prompt
            } else {
                AdapterKind::Lora
            };
            let mut set = AdapterSet::new(&settings.peft_spec(kind), cfg, Some(num_classes), seed, stream)?;
            let (log, final_eval) = {
                let AdapterSet { payload, head } = &mut set;
                let mut obj = AdapterObjective {
                    cfg,
                    base,
                    data: &union,
                    payload: Some(payload),
                    head: head.as_mut().expect("joint adapters carry a head"),
                    targets,
                };
                let log = fit(&mut obj, &settings.joint_train, seed, stream.with(1))?;
                (log, evaluate_objective(&obj, settings.eval_chunk)?)
            };
            rec.loss_curve = curve_from(&log, 0, "train");
            rec.final_train_loss = Some(final_eval.0);
            let head = set.head.as_ref().expect("joint adapters carry a head");
            for (j, t) in tasks.iter().enumerate() {
                let tally = head_predict(cfg, base, Some(&set.payload), head, &seen, &t.test, settings.eval_chunk)?;
                rec.matrix.set(last, j, tally)?;
            }
            rec.trainable_params = set.param_count();
        }
        JointMode::Full => {
            let mut params = base.clone();
            params.set_backbone_trainable(true);
            params.head = Head::init(cfg.hidden_dim, num_classes, seed, stream.with(0));
            let (log, final_eval) = {
                let mut obj = FullObjective {
                    cfg,
                    params: &mut params,
                    data: &union,
                    targets,
                };
                let log = fit(&mut obj, &settings.joint_train, seed, stream.with(1))?;
                (log, evaluate_objective(&obj, settings.eval_chunk)?)
            };
            rec.loss_curve = curve_from(&log, 0, "train");
            rec.final_train_loss = Some(final_eval.0);
            for (j, t) in tasks.iter().enumerate() {
                let tally = head_predict(cfg, &params, None, &params.head, &seen, &t.test, settings.eval_chunk)?;
                rec.matrix.set(last, j, tally)?;
            }
            rec.trainable_params = params.backbone_param_count() + params.head.param_count();
        }
    }
    rec.loss_curve.push(CurvePoint {
        step: rec.loss_curve.len(),
        split: "final_train".into(),
        loss: rec.final_train_loss.unwrap_or(f64::NAN),
        accuracy: 0.0,
    });
    rec.task_seconds.push(start.elapsed().as_secs_f64());
    rec.finish()?;
    Ok(rec)
}
