//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run a subset by number: `cargo test -p peftcl-cli --test acceptance -- 3 5`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use peftcl_cli::ExperimentConfig;
use peftcl_core::harness::bench::{throughput, BenchSettings, Regime};
use peftcl_core::harness::checks::{kmeans_oracle, masked_forward_oracle, metric_identities, zero_increment_identity};
use peftcl_core::harness::gradcheck::{tiny_config, training_gradient_check, GradMode};
use peftcl_core::harness::metrics::ConditionalAccuracy;
use peftcl_core::harness::report::{fmt_sig, METRICS_HEADER};
use peftcl_core::harness::run::{joint_train, pretrain, run_scenario};
use peftcl_core::harness::stream::make_pretext;
use peftcl_core::sx::{sx_train_task, ExpertRegistry};
use peftcl_core::{
    harness::stream::make_stream, AdapterKind, JointMode, Method, RunRecord, Scenario, Seed, SxVariant, Task,
    TrainedState, ViTParams, Variant,
};

const GRAD_COORDS: usize = 100;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 60.0;
const ZERO_CASES: usize = 200;
const MERGE_TOL: f64 = 1e-10;
const MASKED_BATCHES: usize = 1000;
const MASKED_TOL: f64 = 1e-10;
const KMEANS_INSTANCES: usize = 10_000;
const METRIC_MATRICES: usize = 10_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const JOINT_RANK: usize = 4;
const JOINT_PROMPT_LENGTH: usize = 10;
const JOINT_BUDGET_SECS: f64 = 30.0 * 60.0;
/// LoRA variants may trail their prompt counterparts by at most half a point.
const ORDER_TOL: f64 = 0.005;
const TABLE_BUDGET_SECS: f64 = 3600.0;
const TIMER_SLACK: f64 = 0.95;

type Verdict = Result<(bool, String), String>;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load_config(name: &str, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let text = fs::read_to_string(config_path(name)).expect("config file");
    let mut cfg = ExperimentConfig::parse(&text).expect("config parses");
    for (k, v) in overrides {
        cfg.set(k, v).expect("override applies");
    }
    cfg.finish().expect("config validates");
    cfg
}

fn pretrained(cfg: &ExperimentConfig) -> Result<ViTParams, String> {
    let seed = Seed(cfg.pretext.seed);
    let data = make_pretext(&cfg.pretext_spec(), cfg.pretext.classes, cfg.pretext.per_class, seed).map_err(|e| e.to_string())?;
    Ok(pretrain(&cfg.settings, &data, cfg.pretext.classes, seed).map_err(|e| e.to_string())?.0)
}

fn tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Task>, String> {
    let spec = cfg.stream_spec().map_err(|e| e.to_string())?;
    make_stream(&spec, Seed(seed)).map_err(|e| e.to_string())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

/// Artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    desk_base: Option<ViTParams>,
    /// `(scenario, method, seed)` runs on the desk streams.
    table: BTreeMap<(&'static str, &'static str, u64), (RunRecord, TrainedState)>,
    table_seconds: f64,
}

impl Shared {
    fn desk_base(&mut self) -> Result<ViTParams, String> {
        if self.desk_base.is_none() {
            self.desk_base = Some(pretrained(&load_config("desk.conf", &[]))?);
        }
        Ok(self.desk_base.clone().expect("just built"))
    }

    fn table_run(&mut self, scenario: Scenario, method: Method, seed: u64) -> Result<&(RunRecord, TrainedState), String> {
        let key = (scenario.as_str(), method.as_str(), seed);
        if !self.table.contains_key(&key) {
            let cfg = desk_stream(scenario);
            let base = self.desk_base()?;
            let t = tasks(&cfg, seed)?;
            let start = Instant::now();
            let run = run_scenario(method, Variant::default(), scenario, cfg.stream.num_classes, &t, &base, &cfg.settings, Seed(seed))
                .map_err(|e| e.to_string())?;
            self.table_seconds += start.elapsed().as_secs_f64();
            self.table.insert(key, run);
        }
        Ok(&self.table[&key])
    }
}

/// The 5-task class-incremental stream or the 4-domain domain-incremental stream.
fn desk_stream(scenario: Scenario) -> ExperimentConfig {
    match scenario {
        Scenario::Cil => load_config("desk.conf", &[]),
        Scenario::Dil => load_config("desk.conf", &[("stream.scenario", "dil"), ("stream.tasks", "4")]),
    }
}

fn gradient_fidelity(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (label, cfg) in [("plain", tiny_config()), ("conventional", tiny_config().conventional())] {
        for mode in GradMode::all() {
            let r = training_gradient_check(&mode, &cfg, GRAD_COORDS, Seed(1)).map_err(|e| e.to_string())?;
            if r.checked < GRAD_COORDS {
                return Ok((false, format!("{label}/{} checked only {} coordinates", mode.name(), r.checked)));
            }
            worst = worst.max(r.max_rel_error);
            parts.push(format!("{label}/{} {:.1e}", mode.name(), r.max_rel_error));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < GRAD_TOL && secs < GRAD_BUDGET_SECS,
        format!("max rel error {worst:.2e} < {GRAD_TOL:e} over {GRAD_COORDS} coords per mode [{}], {secs:.1}s", parts.join(", ")),
    ))
}

fn zero_increment(_: &mut Shared) -> Verdict {
    let r = zero_increment_identity(ZERO_CASES, Seed(2)).map_err(|e| e.to_string())?;
    Ok((
        r.bitwise_mismatches == 0 && r.merge_max_diff < MERGE_TOL,
        format!(
            "{} random adapters: {} bitwise mismatches, merge gap {:.2e} < {MERGE_TOL:e}",
            r.cases, r.bitwise_mismatches, r.merge_max_diff
        ),
    ))
}

fn masked_forward(_: &mut Shared) -> Verdict {
    let r = masked_forward_oracle(MASKED_BATCHES, Seed(3)).map_err(|e| e.to_string())?;
    let worst = r.layer_max_diff.max(r.model_max_diff).max(r.prompt_max_diff);
    Ok((
        worst < MASKED_TOL,
        format!(
            "{} mixed batches: projection gap {:.2e}, LoRA model gap {:.2e}, prompt model gap {:.2e}",
            r.batches, r.layer_max_diff, r.model_max_diff, r.prompt_max_diff
        ),
    ))
}

fn kmeans_exhaustive(_: &mut Shared) -> Verdict {
    let r = kmeans_oracle(KMEANS_INSTANCES, Seed(4)).map_err(|e| e.to_string())?;
    Ok((
        r.suboptimal == 0 && r.tie_violations == 0,
        format!(
            "{} instances: {} above the exhaustive minimum (worst gap {:.2e}), {} tie-rule violations",
            r.instances, r.suboptimal, r.worst_gap, r.tie_violations
        ),
    ))
}

fn metric_bounds(_: &mut Shared) -> Verdict {
    let r = metric_identities(METRIC_MATRICES, Seed(5)).map_err(|e| e.to_string())?;
    Ok((
        r.negative_forgetting == 0 && r.negative_sum == 0 && r.average_mismatches == 0,
        format!(
            "{} matrices: F < 0 in {}, F + B < 0 in {}, average mismatches {}",
            r.matrices, r.negative_forgetting, r.negative_sum, r.average_mismatches
        ),
    ))
}

fn forced_routing(shared: &mut Shared) -> Verdict {
    let base = shared.desk_base()?;
    let mut runs = 0;
    let mut broken = Vec::new();
    for scenario in [Scenario::Cil, Scenario::Dil] {
        let cfg = desk_stream(scenario);
        let t = tasks(&cfg, 0)?;
        for method in [Method::SPrompts, Method::SLora] {
            for plus_plus in [false, true] {
                let variant = Variant {
                    sx: SxVariant { plus_plus, shared_head: false },
                    forced_routing: true,
                };
                let (rec, _) = run_scenario(method, variant, scenario, cfg.stream.num_classes, &t, &base, &cfg.settings, Seed(0))
                    .map_err(|e| e.to_string())?;
                runs += 1;
                let n = rec.matrix.tasks();
                let constant = (0..n).all(|j| (j..n).all(|i| rec.matrix.tally(i, j) == rec.matrix.tally(j, j)));
                if !constant {
                    broken.push(format!("{}/{}/{}", scenario.as_str(), method.as_str(), variant.name()));
                }
            }
        }
    }
    // expert parameters and prototypes after each task, compared at the end of the stream
    let cfg = desk_stream(Scenario::Cil);
    let t = tasks(&cfg, 0)?;
    let mut unstable = Vec::new();
    for kind in [AdapterKind::Prompt, AdapterKind::Lora] {
        for plus_plus in [false, true] {
            let variant = SxVariant { plus_plus, shared_head: false };
            let sx = cfg.settings.sx_config(kind, variant, cfg.settings.clusters_for(Scenario::Cil, t[0].classes.len()));
            let mut reg = ExpertRegistry::new(&cfg.settings.model, cfg.stream.num_classes, variant, Seed(0));
            let mut snapshots = Vec::new();
            for task in &t {
                sx_train_task(&mut reg, &task.train, &task.classes, &cfg.settings.model, &base, &sx, Seed(0)).map_err(|e| e.to_string())?;
                snapshots.push((reg.experts.last().cloned(), reg.prototypes.last().cloned()));
            }
            for (e, (expert, protos)) in snapshots.iter().enumerate() {
                if reg.experts.get(e) != expert.as_ref() || reg.prototypes.get(e) != protos.as_ref() {
                    unstable.push(format!("{}/{} expert {e}", kind.as_str(), variant.name()));
                }
            }
        }
    }
    Ok((
        broken.is_empty() && unstable.is_empty(),
        format!(
            "{runs} forced-routing runs, non-constant columns in [{}]; experts changed after training: [{}]",
            broken.join(", "),
            unstable.join(", ")
        ),
    ))
}

fn joint_ordering(shared: &mut Shared) -> Verdict {
    let mut cfg = desk_stream(Scenario::Cil);
    cfg.settings.lora_rank = JOINT_RANK;
    cfg.settings.prompt_length = JOINT_PROMPT_LENGTH;
    let base = shared.desk_base()?;
    let start = Instant::now();
    let mut loss: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let t = tasks(&cfg, seed)?;
        for mode in [JointMode::Full, JointMode::Lora, JointMode::Prompt] {
            let rec = joint_train(mode, cfg.stream.num_classes, &t, &base, &cfg.settings, Seed(seed)).map_err(|e| e.to_string())?;
            let l = rec.final_train_loss.ok_or("joint run recorded no final loss")?;
            loss.entry(mode.as_str()).or_default().push(l);
            acc.entry(mode.as_str()).or_default().push(rec.avg_accuracy);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (full, lora, prompt) = (mean(&loss["joint_full"]), mean(&loss["joint_lora"]), mean(&loss["joint_prompt"]));
    let (acc_lora, acc_prompt) = (mean(&acc["joint_lora"]), mean(&acc["joint_prompt"]));
    Ok((
        full <= lora && lora < prompt && acc_lora >= acc_prompt && secs < JOINT_BUDGET_SECS,
        format!(
            "final train loss full {full:.4} <= lora(r={JOINT_RANK}) {lora:.4} < prompt(L={JOINT_PROMPT_LENGTH}) {prompt:.4}; \
             test accuracy lora {acc_lora:.4} >= prompt {acc_prompt:.4}; {secs:.0}s"
        ),
    ))
}

fn table_ordering(shared: &mut Shared) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for scenario in [Scenario::Cil, Scenario::Dil] {
        let mut means = BTreeMap::new();
        for method in [Method::SPrompts, Method::SLora, Method::L2p, Method::L2l] {
            let accs: Vec<f64> = SEEDS
                .iter()
                .map(|&s| shared.table_run(scenario, method, s).map(|(r, _)| r.avg_accuracy))
                .collect::<Result<_, _>>()?;
            means.insert(method.as_str(), mean(&accs));
            parts.push(format!("{}/{} {}", scenario.as_str(), method.as_str(), fmt_list(&accs)));
        }
        let sx_gap = means["s_lora"] - means["s_prompts"];
        let l2x_gap = means["l2l"] - means["l2p"];
        ok &= sx_gap >= -ORDER_TOL && l2x_gap >= -ORDER_TOL;
        parts.push(format!("{} gaps: s_lora-s_prompts {:+.2}pp, l2l-l2p {:+.2}pp", scenario.as_str(), 100.0 * sx_gap, 100.0 * l2x_gap));
    }
    let secs = shared.table_seconds;
    Ok((ok && secs < TABLE_BUDGET_SECS, format!("{}; {secs:.0}s of training", parts.join("; "))))
}

fn wrong_expert(shared: &mut Shared) -> Verdict {
    let mut per_expert = ConditionalAccuracy::default();
    for method in [Method::SPrompts, Method::SLora] {
        for seed in SEEDS {
            let (rec, _) = shared.table_run(Scenario::Cil, method, seed)?;
            per_expert.merge(&rec.conditional.ok_or("S-X run without conditional accuracy")?);
        }
    }
    let cfg = desk_stream(Scenario::Cil);
    let base = shared.desk_base()?;
    let mut shared_head = ConditionalAccuracy::default();
    let variant = Variant {
        sx: SxVariant { plus_plus: false, shared_head: true },
        forced_routing: false,
    };
    for seed in SEEDS {
        let t = tasks(&cfg, seed)?;
        let (rec, _) = run_scenario(Method::SLora, variant, Scenario::Cil, cfg.stream.num_classes, &t, &base, &cfg.settings, Seed(seed))
            .map_err(|e| e.to_string())?;
        shared_head.merge(&rec.conditional.ok_or("S-X run without conditional accuracy")?);
    }
    let (pe, sh) = (per_expert.wrong_expert, shared_head.wrong_expert);
    Ok((
        pe.total > 0 && pe.correct == 0 && sh.correct > 0,
        format!(
            "per-expert heads {}/{} correct under a wrong expert; shared head {}/{} ({:.4}), pooled over seeds {SEEDS:?}",
            pe.correct,
            pe.total,
            sh.correct,
            sh.total,
            sh.accuracy().unwrap_or(0.0)
        ),
    ))
}

fn plus_plus_selection(_: &mut Shared) -> Verdict {
    let cfg = load_config("hard-selection.conf", &[]);
    let base = pretrained(&cfg)?;
    let mut sel: BTreeMap<bool, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let t = tasks(&cfg, seed)?;
        for plus_plus in [false, true] {
            let variant = Variant {
                sx: SxVariant { plus_plus, shared_head: false },
                forced_routing: false,
            };
            let (rec, _) = run_scenario(Method::SLora, variant, Scenario::Cil, cfg.stream.num_classes, &t, &base, &cfg.settings, Seed(seed))
                .map_err(|e| e.to_string())?;
            sel.entry(plus_plus)
                .or_default()
                .push(rec.expert_selection_accuracy.ok_or("no selection accuracy")?);
        }
    }
    let (base_mean, pp_mean) = (mean(&sel[&false]), mean(&sel[&true]));
    Ok((
        pp_mean >= base_mean,
        format!(
            "selection accuracy s_lora++ {pp_mean:.4} [{}] >= s_lora {base_mean:.4} [{}]",
            fmt_list(&sel[&true]),
            fmt_list(&sel[&false])
        ),
    ))
}

/// A small configuration for exercising the command-line tool end to end.
const CLI_CONFIG: &str = "\
model.image_height = 8
model.image_width = 8
model.channels = 3
model.patch_size = 4
model.hidden_dim = 16
model.num_layers = 2
model.num_heads = 2
model.ffn_dim = 32
stream.num_classes = 6
stream.tasks = 3
stream.train_per_class = 12
stream.test_per_class = 6
pretext.classes = 6
pretext.per_class = 12
run.method = s_lora
run.seeds = 0,1
sweep.rank = 1,2
optim.pretrain.epochs = 2
optim.pretrain.batch_size = 16
optim.sx.epochs = 2
optim.sx.batch_size = 16
optim.sx.optimizer = adamw
optim.sx.lr = 0.003
bench.batch_size = 8
bench.warmup = 1
bench.trials = 5
bench.batches_per_trial = 1
";

fn peftcl(config: &Path, out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_peftcl"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("peftcl {args:?} failed: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn csv_files(dir: &Path, found: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            csv_files(&p, found);
        } else if p.extension().is_some_and(|e| e == "csv") {
            found.push(p);
        }
    }
}

/// Runs every command into `out`.
fn cli_session(config: &Path, out: &Path) -> Result<(), String> {
    peftcl(config, out, &["pretrain"])?;
    peftcl(config, out, &["train"])?;
    peftcl(config, out, &["eval"])?;
    peftcl(config, out, &["sweep"])?;
    peftcl(config, out, &["bench", "--regime", "best"])?;
    peftcl(config, out, &["bench", "--regime", "average"])?;
    peftcl(config, out, &["--method", "joint_lora", "train"])?;
    peftcl(config, out, &["report"])
}

/// Checks one bench CSV against the metrics schema; returns a problem description if any.
fn bench_schema_problem(path: &Path, metric: &str) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Some(format!("{}: header differs", path.display()));
    }
    let rows: Vec<&str> = lines.collect();
    if rows.is_empty() {
        return Some(format!("{}: no rows", path.display()));
    }
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let value_ok = f.len() == 6 && f[5].parse::<f64>().is_ok_and(|v| v > 0.0 && fmt_sig(v) == f[5]);
        let ok = f.len() == 6
            && f[0] == "s_lora"
            && f[1] == "base"
            && f[2].parse::<u64>().is_ok()
            && f[3].parse::<usize>().is_ok()
            && f[4] == metric
            && value_ok;
        if !ok {
            return Some(format!("{}: malformed row `{row}`", path.display()));
        }
    }
    None
}

struct CliSessions {
    first: PathBuf,
    second: PathBuf,
    _dir: tempfile::TempDir,
}

fn cli_sessions() -> Result<CliSessions, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("cli.conf");
    fs::write(&config, CLI_CONFIG).map_err(|e| e.to_string())?;
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    cli_session(&config, &first)?;
    cli_session(&config, &second)?;
    Ok(CliSessions { first, second, _dir: dir })
}

fn throughput_sanity(shared: &mut Shared) -> Verdict {
    let cfg = desk_stream(Scenario::Cil);
    let base = shared.desk_base()?;
    let t = tasks(&cfg, 0)?;
    let (_, state) = shared.table_run(Scenario::Cil, Method::SLora, 0)?;
    let bench = BenchSettings::default();
    let best = throughput(state, Regime::Best, &cfg.settings.model, &base, &t, &bench).map_err(|e| e.to_string())?;
    let avg = throughput(state, Regime::Average, &cfg.settings.model, &base, &t, &bench).map_err(|e| e.to_string())?;
    let fast_enough = best.images_per_sec >= TIMER_SLACK * avg.images_per_sec;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("cli.conf");
    fs::write(&config, CLI_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    peftcl(&config, &out, &["pretrain"])?;
    peftcl(&config, &out, &["train"])?;
    peftcl(&config, &out, &["bench", "--regime", "best"])?;
    peftcl(&config, &out, &["bench", "--regime", "average"])?;
    let problems: Vec<String> = [("best", "throughput_best"), ("average", "throughput_avg")]
        .iter()
        .filter_map(|(r, m)| bench_schema_problem(&out.join("bench").join(format!("s_lora_base_{r}.csv")), m))
        .collect();
    Ok((
        fast_enough && problems.is_empty(),
        format!(
            "best {:.0} >= {TIMER_SLACK} x average {:.0} images/s; bench CSV schema: {}",
            best.images_per_sec,
            avg.images_per_sec,
            if problems.is_empty() { "conforms".to_string() } else { problems.join("; ") }
        ),
    ))
}

fn determinism(_: &mut Shared) -> Verdict {
    let s = cli_sessions()?;
    let mut a = Vec::new();
    csv_files(&s.first, &mut a);
    let rel = |p: &Path, root: &Path| p.strip_prefix(root).expect("under root").to_path_buf();
    let mut b = Vec::new();
    csv_files(&s.second, &mut b);
    let names_a: Vec<PathBuf> = a.iter().map(|p| rel(p, &s.first)).collect();
    let names_b: Vec<PathBuf> = b.iter().map(|p| rel(p, &s.second)).collect();
    if names_a != names_b {
        return Ok((false, format!("the two sessions wrote different files: {names_a:?} vs {names_b:?}")));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in &names_a {
        // throughput values are wall-clock measurements
        if name.starts_with("bench") {
            continue;
        }
        compared += 1;
        if fs::read(s.first.join(name)).ok() != fs::read(s.second.join(name)).ok() {
            differing.push(name.display().to_string());
        }
    }
    Ok((
        differing.is_empty() && compared > 0,
        format!(
            "{compared} CSVs from pretrain/train/eval/sweep/report byte-identical across two sessions (bench timings excluded); differing: [{}]",
            differing.join(", ")
        ),
    ))
}

fn main() {
    let criteria: [(u32, &str, fn(&mut Shared) -> Verdict); 12] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "zero-increment identity", zero_increment),
        (3, "masked-forward oracle", masked_forward),
        (4, "k-means oracle", kmeans_exhaustive),
        (5, "metric identities", metric_bounds),
        (6, "no forgetting under forced routing", forced_routing),
        (7, "joint training ordering", joint_ordering),
        (8, "continual ordering on CIL and DIL", table_ordering),
        (9, "wrong-expert accuracy", wrong_expert),
        (10, "++ selection effect", plus_plus_selection),
        (11, "throughput sanity", throughput_sanity),
        (12, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check(&mut shared) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let status = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
