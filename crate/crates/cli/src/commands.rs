//! The `pretrain`, `train`, `eval`, `sweep`, `bench` and `report` commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use peftcl_core::checkpoint::Checkpoint;
use peftcl_core::harness::bench::{throughput, Regime};
use peftcl_core::harness::metrics::average_accuracy;
use peftcl_core::harness::report::{
    curve_csv, metrics_csv, read_metrics, record_rows, summarize, summary_table, write_curve, write_metrics, MetricRow,
};
use peftcl_core::harness::run::{
    joint_train, pretrain, run_scenario, CurvePoint, RunRecord, TrainedState,
};
use peftcl_core::harness::stream::{make_pretext, make_stream, Task};
use peftcl_core::rng::Seed;
use peftcl_core::vit::ViTParams;
use peftcl_core::Error;

use crate::config::{ExperimentConfig, RunMethod};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "peftcl", about = "Continual learning with prompt and LoRA experts on a small vision transformer")]
pub struct Cli {
    /// Experiment config in `section.key = value` lines; defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; repeat for several seeds. Overrides `run.seeds`.
    #[arg(long = "seed", global = true)]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "PEFTCL_OUT")]
    pub out: Option<PathBuf>,
    /// Independent runs executed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Method name; overrides `run.method`.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the backbone on the pretext data and freeze it.
    Pretrain,
    /// Train the method through the task stream for every seed.
    Train,
    /// Re-evaluate stored predictors on every task's test set.
    Eval,
    /// Train every cell of the configured grid for every seed.
    Sweep,
    /// Measure inference throughput of trained predictors.
    Bench {
        #[arg(long, default_value = "best")]
        regime: String,
    },
    /// Aggregate per-seed metrics into mean and sample standard deviation.
    Report,
}

/// Resolved config plus output location.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ExperimentConfig::parse(&text)?
            }
            None => {
                let mut c = ExperimentConfig::default();
                c.finish()?;
                c
            }
        };
        if !cli.seeds.is_empty() {
            cfg.seeds = cli.seeds.clone();
        }
        if let Some(m) = &cli.method {
            cfg.method = RunMethod::parse(m).ok_or_else(|| CliError::Usage(format!("unknown method `{m}`")))?;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("peftcl-out"));
        Ok(Context { cfg, out })
    }

    pub fn backbone_stem(&self) -> PathBuf {
        self.out.join("pretrain").join("backbone")
    }

    pub fn run_label(&self) -> String {
        format!("{}_{}", self.cfg.method.as_str(), self.cfg.variant.name())
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out.join("runs").join(self.run_label()).join(format!("seed{seed}"))
    }

    fn load_backbone(&self) -> CliResult<ViTParams> {
        let stem = self.backbone_stem();
        if !Checkpoint::exists(&stem) {
            return Err(CliError::MissingCheckpoint {
                path: Checkpoint::manifest_path(&stem),
                hint: "peftcl pretrain".into(),
            });
        }
        Ok(ViTParams::from_checkpoint(&Checkpoint::read(&stem)?, &self.cfg.settings.model)?)
    }

    fn tasks(&self, seed: u64) -> CliResult<Vec<Task>> {
        Ok(make_stream(&self.cfg.stream_spec()?, Seed(seed))?)
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs `f` on every item with at most `jobs` in flight; failures are collected, not fatal.
fn run_all<T: Sync, R: Send>(jobs: usize, items: &[T], label: impl Fn(&T) -> String + Sync, f: impl Fn(&T) -> CliResult<R> + Sync + Send) -> CliResult<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<CliResult<R>> = pool.install(|| items.par_iter().map(&f).collect());
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                eprintln!("{} failed: {e}", label(item));
                failed.push(label(item));
            }
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(CliError::Runs {
            failed: failed.len(),
            total: items.len(),
            cells: failed.join(", "),
        })
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Train => cmd_train(&ctx, cli.jobs),
        Command::Eval => cmd_eval(&ctx),
        Command::Sweep => cmd_sweep(&ctx, cli.jobs),
        Command::Bench { regime } => {
            let regime =
                Regime::parse(regime).ok_or_else(|| CliError::Usage(format!("unknown regime `{regime}`")))?;
            cmd_bench(&ctx, regime)
        }
        Command::Report => cmd_report(&ctx),
    }
}

pub fn cmd_pretrain(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let seed = Seed(cfg.pretext.seed);
    let data = make_pretext(&cfg.pretext_spec(), cfg.pretext.classes, cfg.pretext.per_class, seed)?;
    let (params, log) = pretrain(&cfg.settings, &data, cfg.pretext.classes, seed)?;
    let stem = ctx.backbone_stem();
    params.to_checkpoint(&cfg.settings.model).write(&stem)?;
    let curve: Vec<CurvePoint> = log
        .iter()
        .map(|s| CurvePoint {
            step: s.step,
            split: "train".into(),
            loss: s.loss,
            accuracy: s.accuracy,
        })
        .collect();
    write_curve(&ctx.out.join("pretrain").join("curve.csv"), &curve)?;
    let last = log.last().map_or(f64::NAN, |s| s.loss);
    eprintln!("pretrained backbone on {} images, final batch loss {last:.4}", data.len());
    Ok(())
}

/// One run of the configured method; returns the record and, for stream methods, the predictor.
fn train_one(ctx: &Context, cfg: &ExperimentConfig, base: &ViTParams, seed: u64) -> CliResult<(RunRecord, Option<TrainedState>)> {
    let tasks = ctx.tasks(seed)?;
    let n = cfg.stream.num_classes;
    let (mut rec, state) = match cfg.method {
        RunMethod::Stream(m) => {
            let (r, s) = run_scenario(m, cfg.variant, cfg.stream.scenario, n, &tasks, base, &cfg.settings, Seed(seed))?;
            (r, Some(s))
        }
        RunMethod::Joint(mode) => (joint_train(mode, n, &tasks, base, &cfg.settings, Seed(seed))?, None),
    };
    rec.config_hash = cfg.hash();
    Ok((rec, state))
}

pub fn cmd_train(ctx: &Context, jobs: usize) -> CliResult<()> {
    let base = ctx.load_backbone()?;
    let cfg = &ctx.cfg;
    run_all(
        jobs,
        &cfg.seeds,
        |s| format!("{} seed {s}", ctx.run_label()),
        |&seed| {
            let (rec, state) = train_one(ctx, cfg, &base, seed)?;
            let dir = ctx.run_dir(seed);
            write_metrics(&dir.join("metrics.csv"), &record_rows(&rec))?;
            write_curve(&dir.join("curve.csv"), &rec.loss_curve)?;
            write_text(&dir.join("config.txt"), &cfg.to_text())?;
            if let Some(state) = state {
                state.to_checkpoint(&cfg.settings.model).write(&dir.join("state"))?;
            }
            eprintln!(
                "{} seed {seed}: average accuracy {:.4} ({:.1}s)",
                ctx.run_label(),
                rec.avg_accuracy,
                rec.task_seconds.iter().sum::<f64>()
            );
            Ok(())
        },
    )?;
    Ok(())
}

fn load_state(ctx: &Context, seed: u64) -> CliResult<TrainedState> {
    let stem = ctx.run_dir(seed).join("state");
    if !Checkpoint::exists(&stem) {
        return Err(CliError::MissingCheckpoint {
            path: Checkpoint::manifest_path(&stem),
            hint: "peftcl train".into(),
        });
    }
    Ok(TrainedState::from_checkpoint(&Checkpoint::read(&stem)?, &ctx.cfg.settings.model)?)
}

pub fn cmd_eval(ctx: &Context) -> CliResult<()> {
    if matches!(ctx.cfg.method, RunMethod::Joint(_)) {
        return Err(CliError::Usage("joint runs keep no predictor to evaluate".into()));
    }
    let base = ctx.load_backbone()?;
    let cfg = &ctx.cfg;
    for &seed in &cfg.seeds {
        let state = load_state(ctx, seed)?;
        let tasks = ctx.tasks(seed)?;
        let tallies = state.evaluate(cfg.variant, &cfg.settings.model, &base, &tasks, cfg.settings.eval_chunk)?;
        let avg = average_accuracy(&tallies)?;
        let rows = vec![MetricRow::new(
            cfg.method.as_str(),
            &cfg.variant.name(),
            seed,
            tasks.len() - 1,
            "avg_accuracy",
            avg,
        )];
        write_metrics(&ctx.run_dir(seed).join("eval.csv"), &rows)?;
        eprintln!("{} seed {seed}: average accuracy {avg:.4}", ctx.run_label());
    }
    Ok(())
}

/// Grid cells as `(label, config)` over every non-empty sweep axis.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut cells = vec![(String::new(), cfg.clone())];
    let axes: [(&str, &Vec<usize>, fn(&mut ExperimentConfig, usize)); 4] = [
        ("rank", &cfg.sweep.rank, |c, v| c.settings.lora_rank = v),
        ("prompt_length", &cfg.sweep.prompt_length, |c, v| c.settings.prompt_length = v),
        ("clusters", &cfg.sweep.clusters, |c, v| c.settings.clusters = Some(v)),
        ("pool_size", &cfg.sweep.pool_size, |c, v| c.settings.pool_size = v),
    ];
    for (name, values, apply) in axes {
        if values.is_empty() {
            continue;
        }
        cells = cells
            .into_iter()
            .flat_map(|(label, c)| {
                values.iter().map(move |&v| {
                    let mut c = c.clone();
                    apply(&mut c, v);
                    let sep = if label.is_empty() { "" } else { ";" };
                    (format!("{label}{sep}{name}={v}"), c)
                })
            })
            .collect();
    }
    cells
}

pub fn cmd_sweep(ctx: &Context, jobs: usize) -> CliResult<()> {
    let base = ctx.load_backbone()?;
    let cells = sweep_cells(&ctx.cfg);
    if cells.len() == 1 && cells[0].0.is_empty() {
        return Err(CliError::key("sweep", "no axis has values"));
    }
    for (_, c) in &cells {
        c.settings
            .validate()
            .map_err(|e| CliError::key("sweep", e.to_string()))?;
    }
    let work: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| ctx.cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let rows = run_all(
        jobs,
        &work,
        |&(i, s)| format!("cell {} seed {s}", cells[i].0),
        |&(i, seed)| {
            let (label, cell) = &cells[i];
            let (rec, _) = train_one(ctx, cell, &base, seed)?;
            Ok(MetricRow::new(
                &rec.method,
                label,
                seed,
                rec.matrix.tasks() - 1,
                "avg_accuracy",
                rec.avg_accuracy,
            ))
        },
    )?;
    let path = ctx.out.join("sweep").join(format!("{}.csv", ctx.run_label()));
    write_metrics(&path, &rows)?;
    eprintln!("wrote {} sweep rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn cmd_bench(ctx: &Context, regime: Regime) -> CliResult<()> {
    if matches!(ctx.cfg.method, RunMethod::Joint(_)) {
        return Err(CliError::Usage("joint runs keep no predictor to benchmark".into()));
    }
    let base = ctx.load_backbone()?;
    let cfg = &ctx.cfg;
    let metric = match regime {
        Regime::Best => "throughput_best",
        Regime::Average => "throughput_avg",
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let state = load_state(ctx, seed)?;
        let tasks = ctx.tasks(seed)?;
        let t = throughput(&state, regime, &cfg.settings.model, &base, &tasks, &cfg.bench)?;
        eprintln!("{} seed {seed} {}: {:.1} images/s", ctx.run_label(), t.regime, t.images_per_sec);
        rows.push(MetricRow::new(cfg.method.as_str(), &cfg.variant.name(), seed, tasks.len() - 1, metric, t.images_per_sec));
    }
    let path = ctx
        .out
        .join("bench")
        .join(format!("{}_{}.csv", ctx.run_label(), regime.as_str()));
    write_metrics(&path, &rows)?;
    Ok(())
}

fn metric_files(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            metric_files(&p, name, found)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            found.push(p);
        }
    }
    Ok(())
}

pub fn cmd_report(ctx: &Context) -> CliResult<()> {
    let runs = ctx.out.join("runs");
    let mut files = Vec::new();
    metric_files(&runs, "metrics.csv", &mut files)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no metrics.csv under {}", runs.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_metrics(f)?);
    }
    let table = summary_table(&summarize(&rows));
    write_text(&ctx.out.join("report.csv"), &table)?;
    print!("{table}");

    let mut curves = Vec::new();
    metric_files(&runs, "curve.csv", &mut curves)?;
    let mut merged = String::from("run,seed,step,split,loss,accuracy\n");
    for f in &curves {
        let seed_dir = f.parent().expect("curve lives in a seed directory");
        let run = seed_dir.parent().and_then(Path::file_name).map_or("?".into(), |s| s.to_string_lossy());
        let seed = seed_dir.file_name().map_or("?".into(), |s| s.to_string_lossy());
        let seed = seed.trim_start_matches("seed");
        let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        for line in text.lines().skip(1) {
            merged.push_str(&format!("{run},{seed},{line}\n"));
        }
    }
    write_text(&ctx.out.join("report_curves.csv"), &merged)?;
    Ok(())
}

/// The metrics CSV a `train` run writes, for callers that keep records in memory.
pub fn record_csv(rec: &RunRecord) -> String {
    metrics_csv(&record_rows(rec))
}

/// The curve CSV a `train` run writes.
pub fn record_curve_csv(rec: &RunRecord) -> String {
    curve_csv(&rec.loss_curve)
}

