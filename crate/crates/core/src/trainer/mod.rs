//! Multi-task training with equal task sampling, early stopping, encoder
//! freezing, fine-tuning and exact resume.

mod checkpoint;
mod config;
mod history;
mod schedule;

pub use checkpoint::{encoder_digest, BestMark, Checkpoint, EpochStats, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EarlyStop, TrainConfig};
pub use history::{replay_early_stop, select_checkpoint, MetricHistory, Snapshot};
pub use schedule::{effective_steps, equal_task_schedule};

use std::collections::BTreeMap;

use rand::seq::index;

use crate::data::{Example, HeadKind, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::task_metric;
use crate::model::heads::{classification_loss, multi_head_loss, ranking_loss};
use crate::model::Model;
use crate::optim::{adam_step, AdamState};
use crate::params::{ParamGroup, Session};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `patience` evaluations passed without improvement.
    Patience,
    MaxEpochs,
    MaxSteps,
    /// Stopped by `halt_after`; the checkpoint can be resumed.
    Halted,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected parameters plus the full training state.
    pub checkpoint: Checkpoint,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    pub fn history(&self) -> &MetricHistory {
        &self.checkpoint.history
    }

    /// With frozen encoders: whether their bytes are unchanged by training.
    pub fn freeze_check(&self) -> Option<bool> {
        let cfg = self.checkpoint.train_config.as_ref()?;
        let state = self.checkpoint.state.as_ref()?;
        cfg.freeze_encoders
            .then(|| encoder_digest(&state.params) == state.initial_encoder_digest)
    }

    /// Per-epoch update counts by task.
    pub fn update_histograms(&self) -> Vec<BTreeMap<String, u64>> {
        self.checkpoint
            .state
            .as_ref()
            .map(|s| s.epochs.iter().map(|e| e.updates.clone()).collect())
            .unwrap_or_default()
    }
}

pub type SnapshotHook<'a> = dyn FnMut(&Snapshot, &Model) + 'a;

/// Observer hooks for a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop before running this step, leaving a resumable state.
    pub halt_after: Option<u64>,
    /// Called after every evaluation with the evaluated parameters.
    pub on_snapshot: Option<&'a mut SnapshotHook<'a>>,
}

/// Head mode each task trains with: the override if given, else its dataset's head.
pub fn head_mode(cfg: &TrainConfig, ds: &TaskDataset) -> HeadKind {
    cfg.head_modes.get(ds.name()).copied().unwrap_or(ds.head())
}

/// Checks that `model` can train and evaluate `ds` under `mode`.
pub fn check_task(model: &Model, ds: &TaskDataset, mode: HeadKind) -> Result<()> {
    let name = ds.name();
    if !ds.head().supports(mode) {
        return Err(Error::Config(format!(
            "task `{name}` is bound to the {} head and cannot train with {mode}",
            ds.head()
        )));
    }
    if ds.train.is_empty() || ds.valid.is_empty() {
        return Err(Error::Config(format!(
            "task `{name}` needs non-empty train and valid splits"
        )));
    }
    if mode.ranks() && ds.train.len() < 2 {
        return Err(Error::Config(format!(
            "task `{name}`: in-batch ranking needs at least 2 training examples"
        )));
    }
    if mode.classifies() {
        if model.classifier.is_none() {
            return Err(Error::Config(format!(
                "task `{name}` trains a classification head but the model has none"
            )));
        }
        if model.config.answers != ds.header.answers {
            return Err(Error::Compatibility(format!(
                "task `{name}` has {} answers that do not match the model's {} answers",
                ds.header.answers.len(),
                model.config.answers.len()
            )));
        }
    }
    let c = &model.config;
    for (_, split) in ds.splits() {
        for ex in split {
            if ex.style as usize >= c.style_vocab {
                return Err(Error::Compatibility(format!(
                    "example `{}` has style {} outside the model's {} styles",
                    ex.id, ex.style, c.style_vocab
                )));
            }
            let texts = std::iter::once(&ex.context).chain(ex.gold.as_ref());
            for t in texts.flatten() {
                if *t as usize >= c.vocab_size {
                    return Err(Error::Compatibility(format!(
                        "example `{}` has token {t} outside the model vocabulary of {}",
                        ex.id, c.vocab_size
                    )));
                }
            }
            if let Some(img) = &ex.image {
                let bad_global = !img.global.is_empty() && img.global.len() != c.d_img_global;
                let bad_regional = img.regional.iter().any(|r| r.len() != c.d_img_regional);
                if bad_global || bad_regional {
                    return Err(Error::Compatibility(format!(
                        "example `{}` image widths do not match the model ({} global, {} regional)",
                        ex.id, c.d_img_global, c.d_img_regional
                    )));
                }
            }
        }
    }
    Ok(())
}

struct Run<'a> {
    tasks: Vec<&'a TaskDataset>,
    names: Vec<String>,
    modes: Vec<HeadKind>,
    cfg: TrainConfig,
    frozen: Vec<ParamGroup>,
    eval_seed: u64,
}

impl<'a> Run<'a> {
    fn new(model: &Model, tasks: &'a [TaskDataset], cfg: &TrainConfig) -> Result<Self> {
        let names: Vec<String> = tasks.iter().map(|t| t.name().to_string()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        cfg.validate(&refs)?;
        let modes: Vec<HeadKind> = tasks.iter().map(|t| head_mode(cfg, t)).collect();
        for (t, &m) in tasks.iter().zip(&modes) {
            check_task(model, t, m)?;
        }
        let frozen = if cfg.freeze_encoders {
            Model::encoder_groups().to_vec()
        } else {
            Vec::new()
        };
        Ok(Run {
            tasks: tasks.iter().collect(),
            names,
            modes,
            cfg: cfg.clone(),
            frozen,
            eval_seed: eval_seed(cfg.seed),
        })
    }

    fn evaluate(&self, model: &Model, step: u64) -> Result<Snapshot> {
        let mut metrics = BTreeMap::new();
        for ((t, &m), name) in self.tasks.iter().zip(&self.modes).zip(&self.names) {
            metrics.insert(name.clone(), task_metric(model, t, m, Split::Valid, self.eval_seed)?);
        }
        Ok(Snapshot::new(step, metrics))
    }

    /// One optimizer step on a batch of task `t`; returns the batch loss.
    fn step(&self, model: &mut Model, adam: &mut [AdamState], t: usize, step: u64) -> Result<f64> {
        let ds = self.tasks[t];
        let mode = self.modes[t];
        let n = ds.train.len();
        let b = self.cfg.batch_size.min(n);
        let mut rng = seed::rng(self.cfg.seed, &format!("batch/{step}"));
        let batch: Vec<&Example> = index::sample(&mut rng, n, b)
            .into_iter()
            .map(|i| &ds.train[i])
            .collect();
        let grads = self.batch_grads(model, &batch, mode, t, step)?;
        let (loss, grads) = grads;
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.into_iter().zip(grads) {
            if let Some(g) = g {
                let name = model.params.get(id).name.clone();
                adam_step(&name, model.params.tensor_mut(id).data_mut(), &g, &mut adam[id.index()])
                    .map_err(|e| Error::Training(format!("task `{}` step {step}: {e}", self.names[t])))?;
            }
        }
        Ok(loss)
    }

    /// Batch loss and parameter gradients, all examples on one tape.
    fn batch_grads(
        &self,
        model: &Model,
        batch: &[&Example],
        mode: HeadKind,
        t: usize,
        step: u64,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut s = Session::new(&model.params).with_frozen(&self.frozen);
        let mut joints = Vec::with_capacity(batch.len());
        let mut golds = Vec::with_capacity(batch.len());
        for ex in batch {
            joints.push(model.joint(&mut s, ex)?.0);
            if mode.ranks() {
                let gold = ex.gold.as_ref().ok_or_else(|| Error::Validation {
                    id: ex.id.clone(),
                    msg: "ranking example without gold".into(),
                })?;
                golds.push(model.candidate_encoder.encode_pooled(&mut s, gold)?);
            }
        }
        let jv = s.tape.concat_rows(&joints)?;
        let rank = if mode.ranks() {
            let gv = s.tape.concat_rows(&golds)?;
            Some(ranking_loss(&mut s.tape, jv, gv)?)
        } else {
            None
        };
        let cls = if mode.classifies() {
            let a = model.n_answers();
            let mut targets = Vec::with_capacity(batch.len() * a);
            for ex in batch {
                let ans = ex.answer.as_ref().ok_or_else(|| Error::Validation {
                    id: ex.id.clone(),
                    msg: "classification example without answer".into(),
                })?;
                targets.extend(ans.dense(a)?);
            }
            let logits = model.classify(&mut s, jv)?;
            Some(classification_loss(&mut s.tape, logits, &Tensor::new(vec![batch.len(), a], targets)?)?)
        } else {
            None
        };
        let loss = multi_head_loss(&mut s.tape, rank, cls, self.cfg.mix)?;
        let lv = s.tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {lv} on task `{}` at step {step}",
                self.names[t]
            )));
        }
        s.tape.backward(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        for (id, g) in s.grads() {
            grads[id.index()] = Some(g.to_vec());
        }
        Ok((lv, grads))
    }
}

/// Seed of the fixed validation candidate pools for a run seed.
pub fn eval_seed(run_seed: u64) -> u64 {
    seed::derive_seed(run_seed, "eval")
}

/// Trains `model` on `tasks` from scratch.
pub fn train(model: Model, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, tasks, cfg, RunOptions::default())
}

pub fn train_with(model: Model, tasks: &[TaskDataset], cfg: &TrainConfig, opts: RunOptions<'_>) -> Result<TrainOutcome> {
    let run = Run::new(&model, tasks, cfg)?;
    let state = TrainState {
        step: 0,
        params: model.params.clone(),
        adam: model
            .params
            .iter()
            .map(|(_, p)| AdamState::new(p.tensor.numel(), cfg.adam))
            .collect(),
        best: None,
        bad_evals: 0,
        finished: false,
        epochs: Vec::new(),
        initial_encoder_digest: encoder_digest(&model.params),
    };
    let ck = Checkpoint {
        model,
        train_config: Some(cfg.clone()),
        tasks: run.names.clone(),
        history: MetricHistory::default(),
        selected_step: None,
        state: Some(state),
        metadata: BTreeMap::new(),
    };
    drive(ck, &run, opts)
}

/// Continues an interrupted run with the configuration stored in `checkpoint`.
pub fn resume(checkpoint: Checkpoint, tasks: &[TaskDataset], opts: RunOptions<'_>) -> Result<TrainOutcome> {
    let cfg = checkpoint
        .train_config
        .clone()
        .ok_or_else(|| Error::Compatibility("checkpoint carries no training configuration".into()))?;
    let names: Vec<&str> = tasks.iter().map(TaskDataset::name).collect();
    if names != checkpoint.tasks.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Compatibility(format!(
            "checkpoint was trained on [{}], resume was given [{}]",
            checkpoint.tasks.join(", "),
            names.join(", ")
        )));
    }
    if checkpoint.state.is_none() {
        return Err(Error::Compatibility("checkpoint carries no training state".into()));
    }
    let run = Run::new(&checkpoint.model, tasks, &cfg)?;
    drive(checkpoint, &run, opts)
}

/// Continues training from `checkpoint` on one task, early-stopped on that
/// task. The starting parameters count as the step-0 evaluation, so the
/// result never scores below the start on validation.
pub fn fine_tune(checkpoint: &Checkpoint, task: &TaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.early_stop = EarlyStop::Task(task.name().to_string());
    cfg.eval_at_start = true;
    cfg.head_modes.retain(|k, _| k == task.name());
    let mode = head_mode(&cfg, task);
    let model = checkpoint.model.clone();
    check_task(&model, task, mode).map_err(|e| match e {
        Error::Config(m) => Error::Compatibility(m),
        other => other,
    })?;
    train(model, std::slice::from_ref(task), &cfg)
}

fn drive(mut ck: Checkpoint, run: &Run<'_>, mut opts: RunOptions<'_>) -> Result<TrainOutcome> {
    let cfg = &run.cfg;
    let mut state = ck.state.take().expect("training state");
    let mut live = ck.model.clone();
    live.params = state.params.clone();
    // the best parameters live in `ck.model`

    let n = run.tasks.len();
    let eff = effective_steps(n, cfg.steps_per_epoch) as u64;
    let epoch_cap = cfg.max_epochs as u64 * eff;
    let total = cfg.max_steps.map_or(epoch_cap, |m| m.min(epoch_cap));
    let order: Vec<usize> = (0..n).collect();

    let mut evaluate = |live: &Model, state: &mut TrainState, ck: &mut Checkpoint| -> Result<bool> {
        let snap = run.evaluate(live, state.step)?;
        let score = snap.score(&cfg.early_stop)?;
        if let Some(cb) = opts.on_snapshot.as_mut() {
            cb(&snap, live);
        }
        ck.history.push(snap)?;
        if state.best.is_none_or(|b| score > b.score) {
            state.best = Some(BestMark {
                step: state.step,
                score,
            });
            state.bad_evals = 0;
            ck.model.params = live.params.clone();
        } else {
            state.bad_evals += 1;
        }
        Ok(state.bad_evals >= cfg.patience)
    };

    let mut stop = StopReason::MaxEpochs;
    if !state.finished {
        if state.step == 0 && cfg.eval_at_start && ck.history.is_empty() && evaluate(&live, &mut state, &mut ck)? {
            state.finished = true;
            stop = StopReason::Patience;
        }
        let mut schedule: Option<(u64, Vec<usize>)> = None;
        while !state.finished && state.step < total {
            if opts.halt_after == Some(state.step) {
                state.params = live.params.clone();
                ck.state = Some(state);
                ck.selected_step = ck.state.as_ref().and_then(|s| s.best.map(|b| b.step));
                return Ok(TrainOutcome {
                    checkpoint: ck,
                    stop: StopReason::Halted,
                });
            }
            let epoch = state.step / eff;
            let pos = (state.step % eff) as usize;
            if schedule.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let s = equal_task_schedule(&order, cfg.steps_per_epoch, seed::derive_seed(cfg.seed, &format!("schedule/{epoch}")))?;
                schedule = Some((epoch, s));
            }
            let t = schedule.as_ref().expect("schedule").1[pos];
            let loss = run.step(&mut live, &mut state.adam, t, state.step)?;
            while state.epochs.len() <= epoch as usize {
                state.epochs.push(EpochStats::default());
            }
            let stats = &mut state.epochs[epoch as usize];
            *stats.updates.entry(run.names[t].clone()).or_insert(0) += 1;
            *stats.loss_sum.entry(run.names[t].clone()).or_insert(0.0) += loss;
            state.step += 1;
            if state.step.is_multiple_of(cfg.eval_every as u64) && evaluate(&live, &mut state, &mut ck)? {
                state.finished = true;
                stop = StopReason::Patience;
            }
        }
        if !state.finished {
            stop = if state.step < epoch_cap {
                StopReason::MaxSteps
            } else {
                StopReason::MaxEpochs
            };
            let evaluated = ck.history.snapshots.last().map(|s| s.step) == Some(state.step);
            if !evaluated {
                evaluate(&live, &mut state, &mut ck)?;
            }
            state.finished = true;
        }
    }
    state.params = live.params;
    ck.selected_step = state.best.map(|b| b.step);
    ck.state = Some(state);
    Ok(TrainOutcome { checkpoint: ck, stop })
}
