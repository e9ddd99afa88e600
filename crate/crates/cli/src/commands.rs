use std::path::{Path, PathBuf};

use ammc::ablation::{run_ablations, AblationConfig, Workspace};
use ammc::data::{
    generate_synthetic_suite, load_dataset, save_dataset, HeadKind, Split, SyntheticSuiteConfig, TaskDataset,
};
use ammc::eval::{gate_report, render_table, task_metric, transfer_matrix, write_report};
use ammc::model::{Model, ModelConfig};
use ammc::params::ParamGroup;
use ammc::trainer::{eval_seed, head_mode, resume, train_with, Checkpoint, RunOptions, Snapshot, TrainConfig};
use ammc::util::write_atomic;
use ammc::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;

const CHECKPOINT_FILE: &str = "checkpoint.ammc";

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    /// Tasks to train on, by dataset name; empty means every file in the data directory.
    pub tasks: Vec<String>,
    /// Base model; vocabulary, style space, image widths and answers are fitted to the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dataset_path(dir: &Path, task: &str) -> PathBuf {
    dir.join(format!("{task}.jsonl"))
}

/// Loads the named tasks from `dir`, or every `*.jsonl` there when `tasks` is empty.
fn load_tasks(dir: &Path, tasks: &[String]) -> Result<(Vec<TaskDataset>, Vec<PathBuf>)> {
    let paths: Vec<PathBuf> = if tasks.is_empty() {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Error::Domain(format!("no dataset files in {}", dir.display())));
        }
        found
    } else {
        tasks.iter().map(|t| dataset_path(dir, t)).collect()
    };
    let sets = paths.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    for (p, ds) in paths.iter().zip(&sets) {
        if let Some(want) = tasks.iter().find(|t| dataset_path(dir, t) == *p) {
            if ds.name() != want {
                return Err(Error::Validation {
                    id: p.display().to_string(),
                    msg: format!("file holds task `{}`, expected `{want}`", ds.name()),
                });
            }
        }
    }
    Ok((sets, paths))
}

pub fn gen_data(out: &Path, config: Option<&Path>, seed: Option<u64>, train_size: Option<usize>) -> Result<()> {
    let mut cfg: SyntheticSuiteConfig = config.map(read_toml).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = train_size {
        cfg.sizes.train = n;
    }
    let mut m = ManifestBuilder::start("gen-data", &cfg, Some(cfg.seed))?;
    if let Some(c) = config {
        m.input(c);
    }
    for ds in generate_synthetic_suite(&cfg)? {
        let path = dataset_path(out, ds.name());
        save_dataset(&ds, &path)?;
        println!("wrote {} ({} train / {} valid / {} test)", path.display(), ds.train.len(), ds.valid.len(), ds.test.len());
        m.output(&path);
    }
    m.finish(&out.join("manifest.json"))?;
    Ok(())
}

fn progress(s: &Snapshot, _: &Model) {
    let cells: Vec<String> = s.metrics.iter().map(|(t, v)| format!("{t} {:.2}", 100.0 * v)).collect();
    eprintln!("step {:>6}  {}  avg {:.2}", s.step, cells.join("  "), 100.0 * s.average);
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, from: Option<&Path>, halt_after: Option<u64>) -> Result<()> {
    let mut hook = progress;
    let opts = RunOptions { halt_after, on_snapshot: Some(&mut hook) };
    let (outcome, mut m, paths) = match (from, config) {
        (Some(ck_path), _) => {
            let ck = Checkpoint::load(ck_path)?;
            let cfg = ck
                .train_config
                .clone()
                .ok_or_else(|| Error::Compatibility(format!("{} holds no training state", ck_path.display())))?;
            let (tasks, paths) = load_tasks(data, &ck.tasks)?;
            let mut m = ManifestBuilder::start("train --resume", &cfg, Some(cfg.seed))?;
            m.input(ck_path);
            (resume(ck, &tasks, opts)?, m, paths)
        }
        (None, Some(cfg_path)) => {
            let file: TrainFile = read_toml(cfg_path)?;
            // a criterion naming a task outside the listed ones fails before any data is read
            if !file.tasks.is_empty() {
                let names: Vec<&str> = file.tasks.iter().map(String::as_str).collect();
                file.train.validate(&names)?;
            }
            let (tasks, paths) = load_tasks(data, &file.tasks)?;
            let names: Vec<&str> = tasks.iter().map(|d| d.name()).collect();
            file.train.validate(&names)?;
            let model = Model::new(ModelConfig::fit_to(&file.model, &tasks)?, file.train.seed)?;
            let mut m = ManifestBuilder::start("train", &file, Some(file.train.seed))?;
            m.input(cfg_path);
            (train_with(model, &tasks, &file.train, opts)?, m, paths)
        }
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
    };
    for p in &paths {
        m.input(p);
    }
    let ck_path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ck_path)?;
    let log = out.join("metrics.jsonl");
    write_atomic(&log, outcome.history().to_jsonl().as_bytes())?;
    m.output(&ck_path);
    m.output(&log);
    m.note("stop_reason", format!("{:?}", outcome.stop));
    m.note("selected_step", outcome.checkpoint.selected_step);
    m.note("final_step", outcome.checkpoint.state.as_ref().map(|s| s.step));
    if let Some(held) = outcome.freeze_check() {
        m.note("freeze_check", if held { "held" } else { "violated" });
        if !held {
            return Err(Error::Training("encoder parameters changed under freeze_encoders".into()));
        }
    }
    m.finish(&out.join("manifest.json"))?;
    println!(
        "stopped: {:?}; selected step {}; checkpoint {}",
        outcome.stop,
        outcome.checkpoint.selected_step.map_or("-".into(), |s| s.to_string()),
        ck_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TaskMetric {
    task: String,
    head: HeadKind,
    metric: f64,
    /// The value logged at the selected step, when the checkpoint has one.
    recorded: Option<f64>,
}

pub fn eval(ck_path: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let (tasks, paths) = load_tasks(data, &ck.tasks)?;
    let cfg = ck.train_config.clone().unwrap_or_default();
    let es = eval_seed(cfg.seed);
    let mut m = ManifestBuilder::start("eval", &serde_json::json!({ "split": split, "seed": cfg.seed }), Some(cfg.seed))?;
    m.input(ck_path);
    paths.iter().for_each(|p| m.input(p));

    let recorded = ck.selected_step.and_then(|s| ck.history.at(s));
    let mut metrics = Vec::new();
    for ds in &tasks {
        let mut mode = head_mode(&cfg, ds);
        if mode.classifies() && ck.model.classifier.is_none() {
            mode = HeadKind::Ranking;
        }
        let v = task_metric(&ck.model, ds, mode, split, es)?;
        metrics.push(TaskMetric {
            task: ds.name().into(),
            head: mode,
            metric: v,
            recorded: recorded.filter(|_| split == Split::Valid).and_then(|s| s.metrics.get(ds.name()).copied()),
        });
    }
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|t| {
            vec![
                t.task.clone(),
                t.head.to_string(),
                format!("{:.2}", 100.0 * t.metric),
                t.recorded.map_or("-".into(), |r| format!("{:.2}", 100.0 * r)),
            ]
        })
        .collect();
    let header = ["task", "head", &format!("{split} metric"), "recorded"].map(String::from);
    let text = render_table(&header, &rows);
    print!("{text}");
    write_report(out, "metrics", &text, &metrics)?;

    let tm = transfer_matrix(&[("checkpoint".to_string(), &ck.model)], &tasks, split, es);
    let text = tm.render();
    print!("{text}");
    write_report(out, "transfer", &text, &tm)?;
    let mut stems = vec!["metrics".to_string(), "transfer".into()];

    for (ds, t) in tasks.iter().zip(&metrics) {
        let g = gate_report(&ck.model, ds, t.head, split, es)?;
        let text = g.render();
        print!("{text}");
        let stem = format!("gate_{}", ds.name());
        write_report(out, &stem, &text, &g)?;
        stems.push(stem);
    }
    for s in &stems {
        m.output(&out.join(format!("{s}.txt")));
        m.output(&out.join(format!("{s}.json")));
    }
    m.finish(&out.join("manifest.json"))?;
    Ok(())
}

pub fn ablate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: AblationConfig = config.map(read_toml).transpose()?.unwrap_or_default();
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone())?;
    let tables = run_ablations(&ws)?;
    let mut summary = String::new();
    let mut top = ManifestBuilder::start("ablate", &cfg, cfg.seeds.first().copied())?;
    if let Some(c) = config {
        top.input(c);
    }
    for t in &tables {
        let dir = out.join(&t.name);
        let mut m = ManifestBuilder::start(&format!("ablate {}", t.name), &cfg, cfg.seeds.first().copied())?;
        let text = t.render();
        write_report(&dir, "table", &text, t)?;
        m.output(&dir.join("table.txt"));
        m.output(&dir.join("table.json"));
        m.note("failures", t.failures().count());
        m.finish(&dir.join("manifest.json"))?;
        top.output(&dir.join("manifest.json"));
        summary.push_str(&text);
        summary.push('\n');
    }
    print!("{summary}");
    let path = out.join("summary.txt");
    write_atomic(&path, summary.as_bytes())?;
    top.output(&path);
    top.finish(&out.join("manifest.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    tasks: &'a [String],
    model_config: &'a ModelConfig,
    train_config: Option<&'a TrainConfig>,
    selected_step: Option<u64>,
    evaluations: usize,
    resumable_at: Option<u64>,
    finished: Option<bool>,
    parameters: usize,
    encoder_parameters: usize,
    combiner_parameters: usize,
}

pub fn inspect(path: &Path, json: bool) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let params = &ck.model.params;
    let info = Inspection {
        tasks: &ck.tasks,
        model_config: &ck.model.config,
        train_config: ck.train_config.as_ref(),
        selected_step: ck.selected_step,
        evaluations: ck.history.snapshots.len(),
        resumable_at: ck.state.as_ref().filter(|s| !s.finished).map(|s| s.step),
        finished: ck.state.as_ref().map(|s| s.finished),
        parameters: params.scalar_count(),
        encoder_parameters: params.scalar_count_where(|p| p.group.is_encoder()),
        combiner_parameters: params.scalar_count_where(|p| p.group == ParamGroup::Combiner),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&info).map_err(|e| Error::Config(e.to_string()))?);
        return Ok(());
    }
    let c = &ck.model.config;
    println!("checkpoint {}", path.display());
    println!("tasks: {}", if ck.tasks.is_empty() { "-".into() } else { ck.tasks.join(", ") });
    println!(
        "model: d_model {}, {} text layer(s), {} combiner(s) x {} layer(s), {} answers",
        c.d_model,
        c.text_layers,
        c.combiner.n_combiners,
        c.combiner.layers_per_combiner,
        c.answers.len()
    );
    println!(
        "parameters: {} total, {} encoder, {} combiner",
        info.parameters, info.encoder_parameters, info.combiner_parameters
    );
    match (info.selected_step, ck.history.snapshots.last()) {
        (Some(s), Some(last)) => println!("selected step {s} of {} evaluations (last at step {})", info.evaluations, last.step),
        _ => println!("no training history"),
    }
    if let Some(step) = info.resumable_at {
        println!("resumable at step {step}");
    }
    Ok(())
}
