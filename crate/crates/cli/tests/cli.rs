use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ammc::data::load_dataset;
use tempfile::TempDir;

fn ammc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ammc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ammc(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SUITE: &str = "seed = 11\n[sizes]\ntrain = 40\nvalid = 40\ntest = 10\n";

fn train_toml(extra_train: &str, tasks: &str) -> String {
    format!(
        "tasks = {tasks}\n\
         [model]\nd_model = 16\nn_heads = 2\nd_ff = 32\n\
         [model.combiner]\nn_combiners = 2\nlayers_per_combiner = 1\nn_heads = 2\nd_model = 16\n\
         [train]\nbatch_size = 8\nmax_epochs = 2\nsteps_per_epoch = 30\neval_every = 10\npatience = 100\nseed = 5\n{extra_train}"
    )
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("suite.toml"), SUITE).unwrap();
        let f = Fixture { dir };
        ok(&["gen-data", "--config", path(&f.p("suite.toml")), "--out", path(&f.p("data"))]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.p(name);
        fs::write(&p, text).unwrap();
        p
    }
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let f = Fixture::new();
    ok(&["gen-data", "--config", path(&f.p("suite.toml")), "--out", path(&f.p("again"))]);
    let sums = |d: &str| -> Vec<String> {
        manifest(&f.p(d))["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["sha256"].as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(sums("data"), sums("again"));
    assert_eq!(sums("data").len(), 3);
    for t in ["caption", "chat", "qa"] {
        let ds = load_dataset(&f.p("data").join(format!("{t}.jsonl"))).unwrap();
        assert_eq!(ds.train.len(), 40);
    }
    ok(&["gen-data", "--config", path(&f.p("suite.toml")), "--seed", "12", "--out", path(&f.p("other"))]);
    assert_ne!(sums("data"), sums("other"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(ammc(&["gen-data"]).status.code(), Some(2));
    assert_eq!(ammc(&["train", "--data", "x"]).status.code(), Some(2));
    assert_eq!(ammc(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_criterion_task_fails_before_training() {
    let f = Fixture::new();
    let cfg = f.config("bad.toml", &train_toml("early_stop = \"task:qa\"\n", "[\"caption\", \"chat\"]"));
    let out = ammc(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("qa"));
    assert!(!f.p("run").exists());
    let typo = f.config("typo.toml", "[train]\nbatch_sise = 4\n");
    let out = ammc(&["train", "--config", path(&typo), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn resume_reproduces_the_uninterrupted_checkpoint() {
    let f = Fixture::new();
    let cfg = f.config("run.toml", &train_toml("", "[]"));
    let data = f.p("data");
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&f.p("full"))]);
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&f.p("part")), "--halt-after", "23"]);
    assert_eq!(manifest(&f.p("part"))["notes"]["stop_reason"], "Halted");
    let inspect = ok(&["inspect-checkpoint", path(&f.p("part/checkpoint.ammc"))]);
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("resumable at step 23"));
    ok(&["train", "--resume", path(&f.p("part/checkpoint.ammc")), "--data", path(&data), "--out", path(&f.p("done"))]);
    assert_eq!(
        fs::read(f.p("full/checkpoint.ammc")).unwrap(),
        fs::read(f.p("done/checkpoint.ammc")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(f.p("full/metrics.jsonl")).unwrap(),
        fs::read_to_string(f.p("done/metrics.jsonl")).unwrap()
    );
    // the manifest checksums match the files it lists
    for o in manifest(&f.p("done"))["outputs"].as_array().unwrap() {
        let bytes = fs::read(o["path"].as_str().unwrap()).unwrap();
        assert_eq!(ammc::util::sha256_hex(&bytes), o["sha256"].as_str().unwrap());
    }
}

#[test]
fn freeze_check_lands_in_the_manifest() {
    let f = Fixture::new();
    let cfg = f.config("frozen.toml", &train_toml("freeze_encoders = true\nmax_steps = 20\n", "[\"caption\", \"qa\"]"));
    ok(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    assert_eq!(manifest(&f.p("run"))["notes"]["freeze_check"], "held");
}

#[test]
fn eval_reproduces_recorded_metrics() {
    let f = Fixture::new();
    let cfg = f.config("run.toml", &train_toml("max_steps = 30\n", "[]"));
    ok(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    ok(&["eval", "--checkpoint", path(&f.p("run/checkpoint.ammc")), "--data", path(&f.p("data")), "--out", path(&f.p("eval"))]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.p("eval/metrics.json")).unwrap()).unwrap();
    let rows = metrics.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let (got, want) = (r["metric"].as_f64().unwrap(), r["recorded"].as_f64().unwrap());
        assert!((got - want).abs() <= 1e-9, "{r}");
    }
    for stem in ["transfer", "gate_caption", "gate_chat", "gate_qa"] {
        assert!(f.p("eval").join(format!("{stem}.txt")).exists());
    }
}

#[test]
fn single_combiner_gate_report_is_degenerate() {
    let f = Fixture::new();
    let text = train_toml("max_steps = 10\n", "[\"chat\"]").replace("n_combiners = 2", "n_combiners = 1");
    let cfg = f.config("one.toml", &text);
    ok(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    let out = ok(&["eval", "--checkpoint", path(&f.p("run/checkpoint.ammc")), "--data", path(&f.p("data")), "--out", path(&f.p("eval"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("single combiner"));
}

#[test]
fn data_and_compatibility_failures() {
    let f = Fixture::new();
    let cfg = f.config("run.toml", &train_toml("max_steps = 5\n", "[\"caption\"]"));
    ok(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    let ck = f.p("run/checkpoint.ammc");

    fs::remove_file(f.p("data/caption.jsonl")).unwrap();
    let out = ammc(&["eval", "--checkpoint", path(&ck), "--data", path(&f.p("data")), "--out", path(&f.p("eval"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("caption.jsonl"));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    let old = f.p("old.ammc");
    fs::write(&old, bytes).unwrap();
    let out = ammc(&["inspect-checkpoint", path(&old)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("version 7") && err.contains("version 1"), "{err}");
}

#[test]
fn numeric_failure_exits_five() {
    let f = Fixture::new();
    let cfg = f.config("hot.toml", &train_toml("max_steps = 200\n[train.adam]\nlr = 1e300\n", "[\"qa\"]"));
    let out = ammc(&["train", "--config", path(&cfg), "--data", path(&f.p("data")), "--out", path(&f.p("run"))]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_writes_a_table_per_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.toml");
    fs::write(
        &cfg,
        "per_task_steps = 4\nfinetune_epochs = 1\nseeds = [1]\nrun = [\"heads\", \"downsample\"]\n\
         [suite.sizes]\ntrain = 24\nvalid = 40\ntest = 4\n\
         [model]\nd_model = 8\nn_heads = 2\nd_ff = 16\n\
         [model.combiner]\nn_combiners = 2\nlayers_per_combiner = 1\nn_heads = 2\nd_model = 8\n\
         [train]\nbatch_size = 4\nmax_epochs = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    ok(&["ablate", "--config", path(&cfg), "--out", path(&out_dir)]);
    let heads: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("heads/table.json")).unwrap()).unwrap();
    let labels: Vec<&str> = heads["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["classification only", "ranking only", "multi-head"]);
    let down: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("downsample/table.json")).unwrap()).unwrap();
    assert_eq!(down["rows"].as_array().unwrap().len(), 5);
    assert!(out_dir.join("heads/manifest.json").exists() && out_dir.join("summary.txt").exists());
}
