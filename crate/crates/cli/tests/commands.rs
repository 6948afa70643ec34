//! End-to-end behaviour of the `peftcl` binary on a small configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftcl_cli::ExperimentConfig;

const SMALL: &str = "\
model.image_height = 8
model.image_width = 8
model.channels = 3
model.patch_size = 4
model.hidden_dim = 8
model.num_layers = 1
model.num_heads = 2
model.ffn_dim = 16
stream.num_classes = 4
stream.tasks = 2
stream.train_per_class = 6
stream.test_per_class = 4
pretext.classes = 4
pretext.per_class = 6
run.method = s_lora
optim.pretrain.epochs = 1
optim.pretrain.batch_size = 8
optim.sx.epochs = 1
optim.sx.batch_size = 8
optim.sx.optimizer = adamw
optim.sx.lr = 0.003
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.conf"), format!("{SMALL}{extra}")).unwrap();
        Workspace { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_peftcl"))
            .arg("--config")
            .arg(self.dir.path().join("exp.conf"))
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.out().join(rel)).unwrap()
    }
}

fn value_of(csv: &str, metric: &str) -> String {
    csv.lines()
        .find(|l| l.split(',').nth(4) == Some(metric))
        .and_then(|l| l.split(',').nth(5))
        .unwrap_or_else(|| panic!("no {metric} row in\n{csv}"))
        .to_string()
}

#[test]
fn config_text_round_trips() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.conf", "hard-selection.conf"] {
        let mut cfg = ExperimentConfig::parse(&fs::read_to_string(root.join(name)).unwrap()).unwrap();
        cfg.finish().unwrap();
        let mut back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        back.finish().unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn train_is_byte_reproducible_and_eval_matches() {
    let a = Workspace::new("run.seeds = 3\n");
    let b = Workspace::new("run.seeds = 3\n");
    for w in [&a, &b] {
        w.ok(&["pretrain"]);
        w.ok(&["train"]);
        w.ok(&["eval"]);
    }
    for rel in ["pretrain/curve.csv", "runs/s_lora_base/seed3/metrics.csv", "runs/s_lora_base/seed3/curve.csv", "runs/s_lora_base/seed3/eval.csv"] {
        assert_eq!(a.read(rel), b.read(rel), "{rel}");
    }
    // the final row's average accuracy is the last one written
    let last = a
        .read("runs/s_lora_base/seed3/metrics.csv")
        .lines()
        .filter(|l| l.split(',').nth(4) == Some("avg_accuracy"))
        .next_back()
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .to_string();
    assert_eq!(value_of(&a.read("runs/s_lora_base/seed3/eval.csv"), "avg_accuracy"), last);
}

#[test]
fn sweep_writes_one_row_per_cell_and_seed() {
    let w = Workspace::new("sweep.rank = 1,2,4\nrun.seeds = 0,1\n");
    w.ok(&["pretrain"]);
    w.ok(&["sweep"]);
    let csv = w.read("sweep/s_lora_base.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    for r in 1..=4 {
        if r != 3 {
            assert_eq!(rows.iter().filter(|l| l.split(',').nth(1) == Some(&format!("rank={r}"))).count(), 2);
        }
    }
}

#[test]
fn report_gives_mean_and_sample_std() {
    let w = Workspace::new("");
    for (seed, v) in [(0, "0.5"), (1, "0.6"), (2, "0.8")] {
        let dir = w.out().join(format!("runs/s_lora_base/seed{seed}"));
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("metrics.csv"),
            format!("method,variant,seed,task_index,metric,value\ns_lora,base,{seed},1,avg_accuracy,{v}\n"),
        )
        .unwrap();
    }
    let printed = w.ok(&["report"]);
    // mean 1.9 / 3; squared deviations sum to 0.0466667, over 2 degrees of freedom
    let expected = "method,variant,task_index,metric,seeds,mean,std\ns_lora,base,1,avg_accuracy,3,0.633333,0.152753\n";
    assert_eq!(printed, expected);
    assert_eq!(w.read("report.csv"), expected);
}

#[test]
fn missing_checkpoint_fails_with_a_hint() {
    let w = Workspace::new("");
    let o = w.run(&["train"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pretrain"), "{err}");
    w.ok(&["pretrain"]);
    let o = w.run(&["eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
}

#[test]
fn bad_config_is_rejected() {
    let w = Workspace::new("model.hidden_size = 8\n");
    let o = w.run(&["pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.hidden_size"));
    let w = Workspace::new("");
    assert!(!w.run(&["--method", "nope", "train"]).status.success());
    assert!(!w.run(&["bench", "--regime", "worst"]).status.success());
}
