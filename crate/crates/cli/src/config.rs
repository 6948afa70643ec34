//! Experiment configuration in a line-oriented `section.key = value` format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! absent keys take their defaults. Unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use peftcl_core::harness::bench::BenchSettings;
use peftcl_core::harness::data::PatternStyle;
use peftcl_core::harness::run::{JointMode, Method, RunSettings, Variant};
use peftcl_core::harness::stream::{Scenario, Source, StreamSpec, SyntheticSpec};
use peftcl_core::harness::train::{OptimizerName, TrainConfig};
use peftcl_core::l2x::Surrogate;
use peftcl_core::peft::{format_targets, parse_targets};
use peftcl_core::vit::AttentionScale;

use crate::error::{CliError, CliResult};

/// A scenario method or one of the joint-training upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMethod {
    Stream(Method),
    Joint(JointMode),
}

impl RunMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMethod::Stream(m) => m.as_str(),
            RunMethod::Joint(j) => j.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if let Some(m) = Method::parse(s) {
            return Some(RunMethod::Stream(m));
        }
        [JointMode::Prompt, JointMode::Lora, JointMode::Full]
            .into_iter()
            .find(|j| j.as_str() == s)
            .map(RunMethod::Joint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub scenario: Scenario,
    pub num_classes: usize,
    pub tasks: usize,
    /// Read task data from `<dir>/task<t>/{train,test}` instead of generating it.
    pub dir: Option<PathBuf>,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub style: PatternStyle,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub family: String,
    /// Overrides of the stream's pattern style; unset fields follow the stream.
    pub tint_is_nuisance: Option<bool>,
    pub shared_waves: Option<bool>,
}

/// Values swept by `sweep`; empty lists are not swept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub rank: Vec<usize>,
    pub prompt_length: Vec<usize>,
    pub clusters: Vec<usize>,
    pub pool_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub settings: RunSettings,
    pub method: RunMethod,
    pub variant: Variant,
    pub stream: StreamConfig,
    pub pretext: PretextConfig,
    pub bench: BenchSettings,
    pub sweep: SweepGrid,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut settings = RunSettings::default();
        settings.model.num_classes = 10;
        ExperimentConfig {
            settings,
            method: RunMethod::Stream(Method::SLora),
            variant: Variant::default(),
            stream: StreamConfig {
                scenario: Scenario::Cil,
                num_classes: 10,
                tasks: 5,
                dir: None,
                noise: 0.3,
                train_per_class: 60,
                test_per_class: 30,
                style: PatternStyle::default(),
                family: "stream".into(),
            },
            pretext: PretextConfig {
                classes: 20,
                per_class: 50,
                seed: 100,
                family: "pretext".into(),
                tint_is_nuisance: None,
                shared_waves: None,
            },
            bench: BenchSettings::default(),
            sweep: SweepGrid::default(),
            seeds: vec![0],
            out: None,
        }
    }
}

const OPTIM_BLOCKS: [&str; 6] = ["pretrain", "sx", "l2p", "l2l", "finetune", "joint"];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::key(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::key(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_value(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn optim(&self, block: &str) -> &TrainConfig {
        let s = &self.settings;
        match block {
            "pretrain" => &s.pretrain,
            "sx" => &s.sx_train,
            "l2p" => &s.l2p_train,
            "l2l" => &s.l2l_train,
            "finetune" => &s.finetune_train,
            _ => &s.joint_train,
        }
    }

    fn optim_mut(&mut self, block: &str) -> Option<&mut TrainConfig> {
        let s = &mut self.settings;
        Some(match block {
            "pretrain" => &mut s.pretrain,
            "sx" => &mut s.sx_train,
            "l2p" => &mut s.l2p_train,
            "l2l" => &mut s.l2l_train,
            "finetune" => &mut s.finetune_train,
            "joint" => &mut s.joint_train,
            _ => return None,
        })
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let m = &mut self.settings.model;
        let st = &mut self.stream;
        match key {
            "model.image_height" => m.image_height = parse_value(key, v)?,
            "model.image_width" => m.image_width = parse_value(key, v)?,
            "model.channels" => m.channels = parse_value(key, v)?,
            "model.patch_size" => m.patch_size = parse_value(key, v)?,
            "model.hidden_dim" => m.hidden_dim = parse_value(key, v)?,
            "model.num_layers" => m.num_layers = parse_value(key, v)?,
            "model.num_heads" => m.num_heads = parse_value(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse_value(key, v)?,
            "model.bare_blocks" => m.bare_blocks = parse_bool(key, v)?,
            "model.outer_gelu" => m.outer_gelu = parse_bool(key, v)?,
            "model.layer_norm_eps" => m.layer_norm_eps = parse_value(key, v)?,
            "model.attention_scale" => {
                m.attention_scale =
                    AttentionScale::parse(v).ok_or_else(|| CliError::key(key, format!("unknown scale `{v}`")))?
            }
            "run.method" => {
                self.method = RunMethod::parse(v).ok_or_else(|| CliError::key(key, format!("unknown method `{v}`")))?
            }
            "run.plus_plus" => self.variant.sx.plus_plus = parse_bool(key, v)?,
            "run.shared_head" => self.variant.sx.shared_head = parse_bool(key, v)?,
            "run.forced_routing" => self.variant.forced_routing = parse_bool(key, v)?,
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "run.out" => self.out = Some(PathBuf::from(v)),
            "run.eval_chunk" => self.settings.eval_chunk = parse_value(key, v)?,
            "peft.prompt_length" => self.settings.prompt_length = parse_value(key, v)?,
            "peft.rank" => self.settings.lora_rank = parse_value(key, v)?,
            "peft.targets" => {
                self.settings.lora_targets = parse_targets(v).map_err(|e| CliError::key(key, e.to_string()))?
            }
            "peft.alpha" => self.settings.lora_alpha = Some(parse_value(key, v)?),
            "sx.clusters" => self.settings.clusters = Some(parse_value(key, v)?),
            "sx.kmeans_restarts" => self.settings.kmeans.restarts = parse_value(key, v)?,
            "sx.kmeans_max_iters" => self.settings.kmeans.max_iters = parse_value(key, v)?,
            "l2x.pool_size" => self.settings.pool_size = parse_value(key, v)?,
            "l2x.select_count" => self.settings.select_count = parse_value(key, v)?,
            "l2x.lambda" => self.settings.lambda = parse_value(key, v)?,
            "l2x.surrogate" => {
                self.settings.surrogate =
                    Surrogate::parse(v).ok_or_else(|| CliError::key(key, format!("unknown surrogate `{v}`")))?
            }
            "stream.scenario" => {
                st.scenario = Scenario::parse(v).ok_or_else(|| CliError::key(key, format!("unknown scenario `{v}`")))?
            }
            "stream.num_classes" => st.num_classes = parse_value(key, v)?,
            "stream.tasks" => st.tasks = parse_value(key, v)?,
            "stream.dir" => st.dir = Some(PathBuf::from(v)),
            "stream.noise" => st.noise = parse_value(key, v)?,
            "stream.train_per_class" => st.train_per_class = parse_value(key, v)?,
            "stream.test_per_class" => st.test_per_class = parse_value(key, v)?,
            "stream.waves_per_class" => st.style.waves_per_class = parse_value(key, v)?,
            "stream.max_frequency" => st.style.max_frequency = parse_value(key, v)?,
            "stream.tint_is_nuisance" => st.style.tint_is_nuisance = parse_bool(key, v)?,
            "stream.shared_waves" => st.style.shared_waves = parse_bool(key, v)?,
            "stream.family" => st.family = v.to_string(),
            "pretext.classes" => self.pretext.classes = parse_value(key, v)?,
            "pretext.per_class" => self.pretext.per_class = parse_value(key, v)?,
            "pretext.seed" => self.pretext.seed = parse_value(key, v)?,
            "pretext.family" => self.pretext.family = v.to_string(),
            "pretext.tint_is_nuisance" => self.pretext.tint_is_nuisance = Some(parse_bool(key, v)?),
            "pretext.shared_waves" => self.pretext.shared_waves = Some(parse_bool(key, v)?),
            "bench.batch_size" => self.bench.batch_size = parse_value(key, v)?,
            "bench.warmup" => self.bench.warmup = parse_value(key, v)?,
            "bench.trials" => self.bench.trials = parse_value(key, v)?,
            "bench.batches_per_trial" => self.bench.batches_per_trial = parse_value(key, v)?,
            "sweep.rank" => self.sweep.rank = parse_list(key, v)?,
            "sweep.prompt_length" => self.sweep.prompt_length = parse_list(key, v)?,
            "sweep.clusters" => self.sweep.clusters = parse_list(key, v)?,
            "sweep.pool_size" => self.sweep.pool_size = parse_list(key, v)?,
            _ => return self.set_optim(key, v),
        }
        Ok(())
    }

    fn set_optim(&mut self, key: &str, v: &str) -> CliResult<()> {
        let unknown = || CliError::key(key, "unknown key");
        let rest = key.strip_prefix("optim.").ok_or_else(unknown)?;
        let (block, field) = rest.split_once('.').ok_or_else(unknown)?;
        let t = self.optim_mut(block).ok_or_else(unknown)?;
        match field {
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "optimizer" => {
                t.optimizer =
                    OptimizerName::parse(v).ok_or_else(|| CliError::key(key, format!("unknown optimizer `{v}`")))?
            }
            "lr" => t.lr = parse_value(key, v)?,
            "momentum" => t.momentum = parse_value(key, v)?,
            "weight_decay" => t.weight_decay = parse_value(key, v)?,
            "cosine" => t.cosine = parse_bool(key, v)?,
            "eta_min" => t.eta_min = parse_value(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order; unset optional keys are omitted.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.settings;
        let m = &s.model;
        let st = &self.stream;
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("model.image_height", m.image_height.to_string());
        put("model.image_width", m.image_width.to_string());
        put("model.channels", m.channels.to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.hidden_dim", m.hidden_dim.to_string());
        put("model.num_layers", m.num_layers.to_string());
        put("model.num_heads", m.num_heads.to_string());
        put("model.ffn_dim", m.ffn_dim.to_string());
        put("model.bare_blocks", m.bare_blocks.to_string());
        put("model.attention_scale", m.attention_scale.as_str().to_string());
        put("model.outer_gelu", m.outer_gelu.to_string());
        put("model.layer_norm_eps", m.layer_norm_eps.to_string());
        put("run.method", self.method.as_str().to_string());
        put("run.plus_plus", self.variant.sx.plus_plus.to_string());
        put("run.shared_head", self.variant.sx.shared_head.to_string());
        put("run.forced_routing", self.variant.forced_routing.to_string());
        put("run.seeds", join(&self.seeds));
        if let Some(o) = &self.out {
            put("run.out", o.display().to_string());
        }
        put("run.eval_chunk", s.eval_chunk.to_string());
        put("peft.prompt_length", s.prompt_length.to_string());
        put("peft.rank", s.lora_rank.to_string());
        put("peft.targets", format_targets(&s.lora_targets));
        if let Some(a) = s.lora_alpha {
            put("peft.alpha", a.to_string());
        }
        if let Some(k) = s.clusters {
            put("sx.clusters", k.to_string());
        }
        put("sx.kmeans_restarts", s.kmeans.restarts.to_string());
        put("sx.kmeans_max_iters", s.kmeans.max_iters.to_string());
        put("l2x.pool_size", s.pool_size.to_string());
        put("l2x.select_count", s.select_count.to_string());
        put("l2x.lambda", s.lambda.to_string());
        put("l2x.surrogate", s.surrogate.as_str().to_string());
        put("stream.scenario", st.scenario.as_str().to_string());
        put("stream.num_classes", st.num_classes.to_string());
        put("stream.tasks", st.tasks.to_string());
        if let Some(d) = &st.dir {
            put("stream.dir", d.display().to_string());
        }
        put("stream.noise", st.noise.to_string());
        put("stream.train_per_class", st.train_per_class.to_string());
        put("stream.test_per_class", st.test_per_class.to_string());
        put("stream.waves_per_class", st.style.waves_per_class.to_string());
        put("stream.max_frequency", st.style.max_frequency.to_string());
        put("stream.tint_is_nuisance", st.style.tint_is_nuisance.to_string());
        put("stream.shared_waves", st.style.shared_waves.to_string());
        put("stream.family", st.family.clone());
        put("pretext.classes", self.pretext.classes.to_string());
        put("pretext.per_class", self.pretext.per_class.to_string());
        put("pretext.seed", self.pretext.seed.to_string());
        put("pretext.family", self.pretext.family.clone());
        if let Some(b) = self.pretext.tint_is_nuisance {
            put("pretext.tint_is_nuisance", b.to_string());
        }
        if let Some(b) = self.pretext.shared_waves {
            put("pretext.shared_waves", b.to_string());
        }
        put("bench.batch_size", self.bench.batch_size.to_string());
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.trials", self.bench.trials.to_string());
        put("bench.batches_per_trial", self.bench.batches_per_trial.to_string());
        for (k, v) in [
            ("sweep.rank", &self.sweep.rank),
            ("sweep.prompt_length", &self.sweep.prompt_length),
            ("sweep.clusters", &self.sweep.clusters),
            ("sweep.pool_size", &self.sweep.pool_size),
        ] {
            if !v.is_empty() {
                put(k, join(v));
            }
        }
        for block in OPTIM_BLOCKS {
            let t = self.optim(block);
            let p = |f: &str| format!("optim.{block}.{f}");
            e.push((p("epochs"), t.epochs.to_string()));
            e.push((p("batch_size"), t.batch_size.to_string()));
            e.push((p("optimizer"), t.optimizer.as_str().to_string()));
            e.push((p("lr"), t.lr.to_string()));
            e.push((p("momentum"), t.momentum.to_string()));
            e.push((p("weight_decay"), t.weight_decay.to_string()));
            e.push((p("cosine"), t.cosine.to_string()));
            e.push((p("eta_min"), t.eta_min.to_string()));
        }
        e
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(CliError::key(k, "set more than once"));
            }
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Derives dependent fields and checks cross-key constraints.
    pub fn finish(&mut self) -> CliResult<()> {
        self.settings.model.num_classes = self.stream.num_classes;
        let s = &self.settings;
        if s.select_count > s.pool_size {
            return Err(CliError::key(
                "l2x.select_count",
                format!("{} exceeds l2x.pool_size {}", s.select_count, s.pool_size),
            ));
        }
        if s.select_count == 0 {
            return Err(CliError::key("l2x.select_count", "must be at least 1"));
        }
        if s.prompt_length == 0 {
            return Err(CliError::key("peft.prompt_length", "must be at least 1"));
        }
        if s.lora_rank == 0 {
            return Err(CliError::key("peft.rank", "must be at least 1"));
        }
        if s.clusters == Some(0) {
            return Err(CliError::key("sx.clusters", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::key("run.seeds", "needs at least one seed"));
        }
        if self.pretext.classes == 0 || self.pretext.per_class == 0 {
            return Err(CliError::key("pretext.classes", "pretext data must be non-empty"));
        }
        if self.bench.trials < 5 {
            return Err(CliError::key("bench.trials", "median needs at least 5 trials"));
        }
        for block in OPTIM_BLOCKS {
            self.optim(block)
                .validate()
                .map_err(|e| CliError::key(&format!("optim.{block}"), e.to_string()))?;
        }
        self.settings
            .model
            .validate()
            .map_err(|e| CliError::key("model", e.to_string()))?;
        if s.model.bare_blocks && s.lora_targets.contains(&peftcl_core::vit::ProjectionSite::Output) {
            return Err(CliError::key("peft.targets", "bare blocks have no output projection"));
        }
        self.stream_spec()
            .map_err(|e| CliError::key("stream", e.to_string()))?;
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        let m = &self.settings.model;
        SyntheticSpec {
            height: m.image_height,
            width: m.image_width,
            channels: m.channels,
            noise: self.stream.noise,
            train_per_class: self.stream.train_per_class,
            test_per_class: self.stream.test_per_class,
            style: self.stream.style.clone(),
            family: self.stream.family.clone(),
        }
    }

    pub fn pretext_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec {
            family: self.pretext.family.clone(),
            ..self.synthetic()
        };
        if let Some(b) = self.pretext.tint_is_nuisance {
            spec.style.tint_is_nuisance = b;
        }
        if let Some(b) = self.pretext.shared_waves {
            spec.style.shared_waves = b;
        }
        spec
    }

    pub fn stream_spec(&self) -> peftcl_core::Result<StreamSpec> {
        let source = match &self.stream.dir {
            Some(d) => Source::Files(d.clone()),
            None => Source::Synthetic(self.synthetic()),
        };
        match self.stream.scenario {
            Scenario::Cil => StreamSpec::cil(self.stream.num_classes, self.stream.tasks, source),
            Scenario::Dil => StreamSpec::dil(self.stream.num_classes, self.stream.tasks, source),
        }
    }

    /// FNV-1a of the canonical text, identifying the configuration in run outputs.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}
