//! Synthetic replays of the ablation studies: early-stopping criteria,
//! multi-task then fine-tune, head choice, encoder freezing, layer-matched
//! combiners and training-set downsampling.

mod table;

pub use table::{AblationRow, AblationTable, ColumnKind};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{downsample, generate_synthetic_suite, HeadKind, SampleSize, Split, SyntheticSuiteConfig, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{classification_accuracy, recall_at_1, task_metric, ModelScorer};
use crate::model::{Model, ModelConfig};
use crate::params::ParamGroup;
use crate::trainer::{
    eval_seed, fine_tune, head_mode, replay_early_stop, train, train_with, Checkpoint, EarlyStop, MetricHistory,
    RunOptions, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    EarlyStop,
    MtFt,
    Heads,
    Freeze,
    LayerMatched,
    Downsample,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        AblationKind::EarlyStop,
        AblationKind::MtFt,
        AblationKind::Heads,
        AblationKind::Freeze,
        AblationKind::LayerMatched,
        AblationKind::Downsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::EarlyStop => "early_stop",
            AblationKind::MtFt => "mt_ft",
            AblationKind::Heads => "heads",
            AblationKind::Freeze => "freeze",
            AblationKind::LayerMatched => "layer_matched",
            AblationKind::Downsample => "downsample",
        }
    }
}

/// Settings shared by every ablation. Each run trains for `train.max_epochs`
/// epochs of `per_task_steps` updates per task and evaluates once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub suite: SyntheticSuiteConfig,
    pub model: ModelConfig,
    /// Base training settings; schedule, seed and criterion are set per run.
    pub train: TrainConfig,
    pub per_task_steps: usize,
    pub finetune_epochs: usize,
    pub seeds: Vec<u64>,
    pub run: Vec<AblationKind>,
    pub heads_task: String,
    pub downsample_task: String,
    pub downsample_fractions: Vec<f64>,
    /// Combiner counts `N` of the layer-matched control; the plain combiner
    /// gets `N × layers_per_combiner` layers.
    pub layer_budgets: Vec<usize>,
    /// Seeds used by the layer-matched control (a prefix of `seeds`).
    pub layer_matched_seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.combiner.n_combiners = 2;
        AblationConfig {
            suite: SyntheticSuiteConfig::default(),
            model,
            train: TrainConfig {
                max_epochs: 6,
                patience: 2,
                ..TrainConfig::default()
            },
            per_task_steps: 100,
            finetune_epochs: 3,
            seeds: vec![1, 2, 3],
            run: AblationKind::ALL.to_vec(),
            heads_task: "qa".into(),
            downsample_task: "caption".into(),
            downsample_fractions: vec![0.25, 0.375, 0.5, 0.625, 1.0],
            layer_budgets: vec![2, 3, 4],
            layer_matched_seeds: 1,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.per_task_steps == 0 {
            return Err(Error::Config("per_task_steps must be positive".into()));
        }
        if self.downsample_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("downsample fractions must lie in (0, 1]".into()));
        }
        if self.layer_budgets.iter().any(|n| !(1..=4).contains(n)) {
            return Err(Error::Config("layer budgets must lie in 1..=4".into()));
        }
        let names: Vec<&str> = self.suite.tasks.iter().map(|t| t.name()).collect();
        for t in [&self.heads_task, &self.downsample_task] {
            if !names.contains(&t.as_str()) {
                return Err(Error::Config(format!("ablation task `{t}` is not in the suite")));
            }
        }
        self.model.validate()
    }

    /// Training settings for a run over `n_tasks` tasks.
    pub fn train_config(&self, n_tasks: usize, seed: u64, early_stop: EarlyStop) -> TrainConfig {
        let steps = self.per_task_steps * n_tasks;
        TrainConfig {
            steps_per_epoch: steps,
            eval_every: steps,
            seed,
            early_stop,
            ..self.train.clone()
        }
    }
}

/// The generated suite plus the model configuration fitted to all of it.
pub struct Workspace {
    pub config: AblationConfig,
    pub suite: Vec<TaskDataset>,
    pub model_config: ModelConfig,
}

impl Workspace {
    pub fn new(config: AblationConfig) -> Result<Self> {
        config.validate()?;
        let suite = generate_synthetic_suite(&config.suite)?;
        let model_config = ModelConfig::fit_to(&config.model, &suite)?;
        Ok(Workspace {
            config,
            suite,
            model_config,
        })
    }

    pub fn task(&self, name: &str) -> Result<&TaskDataset> {
        self.suite
            .iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| Error::Config(format!("no task `{name}` in the suite")))
    }

    pub fn task_names(&self) -> Vec<String> {
        self.suite.iter().map(|d| d.name().to_string()).collect()
    }

    pub fn model(&self, seed: u64) -> Result<Model> {
        Model::new(self.model_config.clone(), seed)
    }

    fn model_with(&self, seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> Result<Model> {
        let mut c = self.model_config.clone();
        edit(&mut c);
        Model::new(c, seed)
    }

    /// Validation metric of every suite task under `model`.
    pub fn evaluate_all(&self, model: &Model, seed: u64) -> Vec<Option<f64>> {
        let defaults = TrainConfig::default();
        self.suite
            .iter()
            .map(|d| task_metric(model, d, head_mode(&defaults, d), Split::Valid, eval_seed(seed)).ok())
            .collect()
    }
}

/// A multi-task run over the whole suite that never stops early and keeps
/// the parameters of every evaluation, so any stopping rule can be replayed
/// exactly.
pub struct MultiTaskStudy {
    pub seed: u64,
    pub history: MetricHistory,
    pub models: BTreeMap<u64, Model>,
}

impl MultiTaskStudy {
    pub fn run(ws: &Workspace, seed: u64) -> Result<Self> {
        let mut cfg = ws.config.train_config(ws.suite.len(), seed, EarlyStop::Average);
        cfg.patience = cfg.max_epochs + 1;
        let mut models = BTreeMap::new();
        let mut keep = |s: &crate::trainer::Snapshot, m: &Model| {
            models.insert(s.step, m.clone());
        };
        let out = train_with(
            ws.model(seed)?,
            &ws.suite,
            &cfg,
            RunOptions {
                halt_after: None,
                on_snapshot: Some(&mut keep),
            },
        )?;
        Ok(MultiTaskStudy {
            seed,
            history: out.checkpoint.history,
            models,
        })
    }

    /// The step a run early-stopped on `criterion` would select.
    pub fn selected(&self, criterion: &EarlyStop, patience: usize) -> Result<u64> {
        Ok(replay_early_stop(&self.history, criterion, patience)?.0)
    }

    pub fn metrics_at(&self, step: u64, tasks: &[String]) -> Vec<Option<f64>> {
        let snap = self.history.at(step);
        tasks
            .iter()
            .map(|t| snap.and_then(|s| s.metrics.get(t).copied()))
            .collect()
    }
}

fn with_average(mut cells: Vec<Option<f64>>) -> Vec<Option<f64>> {
    let avg = if cells.iter().all(Option::is_some) && !cells.is_empty() {
        Some(cells.iter().flatten().sum::<f64>() / cells.len() as f64)
    } else {
        None
    };
    cells.push(avg);
    cells
}

fn metric_columns(tasks: &[String]) -> (Vec<String>, Vec<ColumnKind>) {
    let mut cols = tasks.to_vec();
    cols.push("avg".into());
    let kinds = vec![ColumnKind::Metric; cols.len()];
    (cols, kinds)
}

fn collect_rows(labels: &[String], cells: Vec<Vec<Result<Vec<Option<f64>>>>>) -> Vec<AblationRow> {
    // cells[seed][row]
    labels
        .iter()
        .enumerate()
        .map(|(r, label)| {
            let mut per_seed = Vec::new();
            let mut failures = Vec::new();
            for (s, seed_rows) in cells.iter().enumerate() {
                match &seed_rows[r] {
                    Ok(v) => per_seed.push(v.clone()),
                    Err(e) => {
                        failures.push(format!("seed #{s}: {e}"));
                        per_seed.push(Vec::new());
                    }
                }
            }
            AblationRow::new(label.clone(), per_seed, failures)
        })
        .collect()
}

/// Validation metrics of the checkpoints selected by early stopping on each
/// task and on the task average.
pub fn early_stop_table(ws: &Workspace, studies: &[MultiTaskStudy]) -> AblationTable {
    let tasks = ws.task_names();
    let mut criteria: Vec<EarlyStop> = tasks.iter().map(|t| EarlyStop::Task(t.clone())).collect();
    criteria.push(EarlyStop::Average);
    let labels: Vec<String> = criteria.iter().map(|c| format!("stop on {c}")).collect();
    let cells = studies
        .iter()
        .map(|st| {
            criteria
                .iter()
                .map(|c| {
                    let step = st.selected(c, ws.config.train.patience)?;
                    Ok(with_average(st.metrics_at(step, &tasks)))
                })
                .collect()
        })
        .collect();
    let (columns, kinds) = metric_columns(&tasks);
    AblationTable {
        name: AblationKind::EarlyStop.name().into(),
        title: "Validation metric by early-stopping criterion (multi-task)".into(),
        columns,
        kinds,
        rows: collect_rows(&labels, cells),
        notes: vec![],
    }
}

/// The multi-task checkpoint against that checkpoint fine-tuned on each task,
/// every row evaluated on every task.
pub fn mt_ft_table(ws: &Workspace, studies: &[MultiTaskStudy]) -> AblationTable {
    let tasks = ws.task_names();
    let mut labels = vec!["multi-task".to_string()];
    labels.extend(tasks.iter().map(|t| format!("MT+FT {t}")));
    let cells = studies
        .iter()
        .map(|st| {
            let mut rows = Vec::new();
            let mt = st
                .selected(&EarlyStop::Average, ws.config.train.patience)
                .and_then(|step| {
                    st.models
                        .get(&step)
                        .map(|m| (step, m))
                        .ok_or_else(|| Error::Training(format!("no model kept at step {step}")))
                });
            let (step, mt_model) = match mt {
                Ok(x) => x,
                Err(e) => {
                    let msg = e.to_string();
                    return labels.iter().map(|_| Err(Error::Training(msg.clone()))).collect();
                }
            };
            rows.push(Ok(with_average(st.metrics_at(step, &tasks))));
            let ck = Checkpoint::from_model(mt_model.clone());
            for t in &tasks {
                let row = (|| {
                    let ds = ws.task(t)?;
                    let mut cfg = ws.config.train_config(1, st.seed, EarlyStop::Task(t.clone()));
                    cfg.max_epochs = ws.config.finetune_epochs;
                    let out = fine_tune(&ck, ds, &cfg)?;
                    Ok(with_average(ws.evaluate_all(out.model(), st.seed)))
                })();
                rows.push(row);
            }
            rows
        })
        .collect();
    let (columns, kinds) = metric_columns(&tasks);
    AblationTable {
        name: AblationKind::MtFt.name().into(),
        title: "Multi-task checkpoint and per-task fine-tuning, validation metric".into(),
        columns,
        kinds,
        rows: collect_rows(&labels, cells),
        notes: vec!["off-diagonal cells of the fine-tuned rows may fall below the multi-task row".into()],
    }
}

/// Best value of `series` (one entry per evaluation) under the
/// early-stopping rule with `patience`.
pub fn early_stopped_value(series: &[(u64, f64)], patience: usize) -> Result<f64> {
    let mut h = MetricHistory::default();
    for &(step, v) in series {
        h.push(crate::trainer::Snapshot::new(step, BTreeMap::from([("m".to_string(), v)])))?;
    }
    let (step, _) = replay_early_stop(&h, &EarlyStop::Average, patience)?;
    Ok(series.iter().find(|(s, _)| *s == step).expect("selected step").1)
}

/// One task trained with the classification head, the ranking head, or both.
/// Each head column is early-stopped on its own metric.
pub fn heads_table(ws: &Workspace) -> AblationTable {
    let task = ws.config.heads_task.clone();
    let modes = [
        ("classification only", HeadKind::Classification),
        ("ranking only", HeadKind::Ranking),
        ("multi-head", HeadKind::Both),
    ];
    let labels: Vec<String> = modes.iter().map(|(l, _)| l.to_string()).collect();
    let patience = ws.config.train.patience;
    let cells = ws
        .config
        .seeds
        .iter()
        .map(|&seed| {
            modes
                .iter()
                .map(|&(_, mode)| {
                    let ds = ws.task(&task)?;
                    let mut cfg = ws.config.train_config(1, seed, EarlyStop::Task(task.clone()));
                    cfg.head_modes.insert(task.clone(), mode);
                    cfg.patience = cfg.max_epochs + 1;
                    let es = eval_seed(seed);
                    let mut rank = Vec::new();
                    let mut cls = Vec::new();
                    let mut err = None;
                    let mut probe = |s: &crate::trainer::Snapshot, m: &Model| {
                        let scorer = ModelScorer::new(m);
                        if mode.ranks() {
                            match recall_at_1(&scorer, ds, Split::Valid, es) {
                                Ok(v) => rank.push((s.step, v)),
                                Err(e) => err = Some(e),
                            }
                        }
                        if mode.classifies() {
                            match classification_accuracy(&scorer, ds, Split::Valid) {
                                Ok(v) => cls.push((s.step, v)),
                                Err(e) => err = Some(e),
                            }
                        }
                    };
                    train_with(
                        ws.model(seed)?,
                        std::slice::from_ref(ds),
                        &cfg,
                        RunOptions {
                            halt_after: None,
                            on_snapshot: Some(&mut probe),
                        },
                    )?;
                    if let Some(e) = err {
                        return Err(e);
                    }
                    let pick = |v: &[(u64, f64)]| (!v.is_empty()).then(|| early_stopped_value(v, patience)).transpose();
                    Ok(vec![pick(&rank)?, pick(&cls)?])
                })
                .collect()
        })
        .collect();
    AblationTable {
        name: AblationKind::Heads.name().into(),
        title: format!("Head choice on `{task}`, validation metric"),
        columns: vec!["ranking head".into(), "class. head".into()],
        kinds: vec![ColumnKind::Metric; 2],
        rows: collect_rows(&labels, cells),
        notes: vec![],
    }
}

/// Multi-task training with frozen encoders against fully fine-tuned encoders.
/// The frozen row also records whether encoder bytes stayed identical.
pub fn freeze_table(ws: &Workspace, studies: &[MultiTaskStudy]) -> AblationTable {
    let tasks = ws.task_names();
    let labels = vec!["frozen encoders".to_string(), "fine-tuned encoders".to_string()];
    let mut freeze_ok = Vec::new();
    let cells = studies
        .iter()
        .map(|st| {
            let frozen = (|| {
                let cfg = TrainConfig {
                    freeze_encoders: true,
                    ..ws.config.train_config(ws.suite.len(), st.seed, EarlyStop::Average)
                };
                let out = train(ws.model(st.seed)?, &ws.suite, &cfg)?;
                freeze_ok.push(out.freeze_check() == Some(true));
                let step = out.checkpoint.selected_step.unwrap_or(0);
                let snap = out.history().at(step).cloned();
                Ok(with_average(
                    tasks
                        .iter()
                        .map(|t| snap.as_ref().and_then(|s| s.metrics.get(t).copied()))
                        .collect(),
                ))
            })();
            let tuned = st
                .selected(&EarlyStop::Average, ws.config.train.patience)
                .map(|step| with_average(st.metrics_at(step, &tasks)));
            vec![frozen, tuned]
        })
        .collect();
    let (columns, kinds) = metric_columns(&tasks);
    let all_ok = !freeze_ok.is_empty() && freeze_ok.iter().all(|&b| b);
    AblationTable {
        name: AblationKind::Freeze.name().into(),
        title: "Frozen vs fine-tuned text/image encoders (multi-task), validation metric".into(),
        columns,
        kinds,
        rows: collect_rows(&labels, cells),
        notes: vec![format!(
            "freeze contract (encoder bytes unchanged): {}",
            if all_ok { "held" } else { "VIOLATED" }
        )],
    }
}

/// Combiner parameter count of a model.
pub fn combiner_params(model: &Model) -> usize {
    model
        .params
        .scalar_count_where(|p| p.group == ParamGroup::Combiner)
}

/// Plain combiners of `N × layers` layers against `N`-way gated mixtures of
/// `layers`-layer combiners, at matched parameter counts.
pub fn layer_matched_table(ws: &Workspace) -> AblationTable {
    let tasks = ws.task_names();
    let per = ws.config.model.combiner.layers_per_combiner;
    let mut variants = Vec::new();
    for &n in &ws.config.layer_budgets {
        variants.push((format!("MMC {} layers", n * per), 1, n * per));
    }
    for &n in &ws.config.layer_budgets {
        variants.push((format!("{n}-AMMC ({per} layers each)"), n, per));
    }
    let labels: Vec<String> = variants.iter().map(|v| v.0.clone()).collect();
    let seeds: Vec<u64> = ws
        .config
        .seeds
        .iter()
        .copied()
        .take(ws.config.layer_matched_seeds.max(1))
        .collect();
    let cells = seeds
        .iter()
        .map(|&seed| {
            variants
                .iter()
                .map(|(_, n, layers)| {
                    let model = ws.model_with(seed, |c| {
                        c.combiner.n_combiners = *n;
                        c.combiner.layers_per_combiner = *layers;
                    })?;
                    let count = combiner_params(&model) as f64;
                    let cfg = ws.config.train_config(ws.suite.len(), seed, EarlyStop::Average);
                    let out = train(model, &ws.suite, &cfg)?;
                    let step = out.checkpoint.selected_step.unwrap_or(0);
                    let snap = out.history().at(step).cloned();
                    let mut row = vec![Some(count)];
                    row.extend(with_average(
                        tasks
                            .iter()
                            .map(|t| snap.as_ref().and_then(|s| s.metrics.get(t).copied()))
                            .collect(),
                    ));
                    Ok(row)
                })
                .collect()
        })
        .collect();
    let mut columns = vec!["combiner params".to_string()];
    let (mcols, mut kinds) = metric_columns(&tasks);
    columns.extend(mcols);
    kinds.insert(0, ColumnKind::Count);
    let mut table = AblationTable {
        name: AblationKind::LayerMatched.name().into(),
        title: "Layer-matched plain vs gated combiners (multi-task), validation metric".into(),
        columns,
        kinds,
        rows: collect_rows(&labels, cells),
        notes: vec![],
    };
    let k = ws.config.layer_budgets.len();
    for i in 0..k {
        let (a, b) = (&table.rows[i], &table.rows[k + i]);
        if let (Some(pa), Some(pb)) = (a.median[0], b.median[0]) {
            let rel = (pa - pb).abs() / pa;
            table.notes.push(format!(
                "{} vs {}: parameter counts differ by {:.3}%",
                a.label,
                b.label,
                100.0 * rel
            ));
        }
    }
    let mmc_avgs: Vec<Option<f64>> = table.rows[..k].iter().map(|r| *r.median.last().expect("avg")).collect();
    if mmc_avgs.iter().all(Option::is_some) && k > 1 {
        let v: Vec<f64> = mmc_avgs.into_iter().flatten().collect();
        let hurts = v.windows(2).all(|w| w[1] < w[0]);
        table.notes.push(format!(
            "more plain-combiner layers lowering the average: {}",
            if hurts { "observed" } else { "not observed" }
        ));
    }
    table
}

/// Single-task against multi-task training as the downsampled task's
/// training set grows.
pub fn downsample_table(ws: &Workspace) -> AblationTable {
    let task = ws.config.downsample_task.clone();
    let full = ws.task(&task).map(|d| d.train.len()).unwrap_or(0);
    let labels: Vec<String> = ws
        .config
        .downsample_fractions
        .iter()
        .map(|f| format!("{:.1}% ({})", 100.0 * f, ((f * full as f64).round() as usize).max(1)))
        .collect();
    let cells = ws
        .config
        .seeds
        .iter()
        .map(|&seed| {
            ws.config
                .downsample_fractions
                .iter()
                .map(|&f| {
                    let small = downsample(ws.task(&task)?, SampleSize::Fraction(f), seed)?;
                    let es = EarlyStop::Task(task.clone());
                    let st = train(
                        ws.model(seed)?,
                        std::slice::from_ref(&small),
                        &ws.config.train_config(1, seed, es.clone()),
                    )?;
                    let mixed: Vec<TaskDataset> = ws
                        .suite
                        .iter()
                        .map(|d| if d.name() == task { small.clone() } else { d.clone() })
                        .collect();
                    let mt = train(
                        ws.model(seed)?,
                        &mixed,
                        &ws.config.train_config(mixed.len(), seed, es),
                    )?;
                    let pick = |o: &crate::trainer::TrainOutcome| {
                        o.checkpoint
                            .selected_step
                            .and_then(|s| o.history().at(s))
                            .and_then(|s| s.metrics.get(&task).copied())
                    };
                    let (a, b) = (pick(&st), pick(&mt));
                    Ok(vec![a, b, a.zip(b).map(|(a, b)| b - a)])
                })
                .collect()
        })
        .collect();
    AblationTable {
        name: AblationKind::Downsample.name().into(),
        title: format!("Training-set size of `{task}`: single-task vs multi-task validation R@1"),
        columns: vec!["single-task".into(), "multi-task".into(), "gain".into()],
        kinds: vec![ColumnKind::Metric, ColumnKind::Metric, ColumnKind::Delta],
        rows: collect_rows(&labels, cells),
        notes: vec![],
    }
}

/// Runs the configured ablations; a failing run is recorded in its table.
pub fn run_ablations(ws: &Workspace) -> Result<Vec<AblationTable>> {
    let kinds = &ws.config.run;
    let needs_study = kinds
        .iter()
        .any(|k| matches!(k, AblationKind::EarlyStop | AblationKind::MtFt | AblationKind::Freeze));
    let studies: Vec<MultiTaskStudy> = if needs_study {
        ws.config
            .seeds
            .iter()
            .map(|&s| MultiTaskStudy::run(ws, s))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(kinds
        .iter()
        .map(|k| match k {
            AblationKind::EarlyStop => early_stop_table(ws, &studies),
            AblationKind::MtFt => mt_ft_table(ws, &studies),
            AblationKind::Heads => heads_table(ws),
            AblationKind::Freeze => freeze_table(ws, &studies),
            AblationKind::LayerMatched => layer_matched_table(ws),
            AblationKind::Downsample => downsample_table(ws),
        })
        .collect())
}
