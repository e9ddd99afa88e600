//! Recall@1 over fixed candidate pools, classification accuracy, transfer
//! matrices and combiner gate reports.

mod report;

pub use report::{render_table, write_report, GateReport, TransferMatrix, TransferRow};

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::data::{Example, GoldIndex, HeadKind, Split, TaskDataset, TokenId};
use crate::error::{Error, Result};
use crate::model::heads::{argmax, rank_candidates};
use crate::model::{GateRecord, Model};
use crate::params::Session;
use crate::tensor::Tensor;

/// Scores a candidate list for one example.
pub trait RankScorer: Sync {
    fn score_candidates(&self, example: &Example, candidates: &[Vec<TokenId>]) -> Result<Vec<f64>>;
}

/// Produces answer logits for one example.
pub trait AnswerScorer: Sync {
    fn answer_logits(&self, example: &Example) -> Result<Vec<f64>>;
}

/// Model-backed scorer. Candidate encodings are cached per text; with
/// `probe = Some(i)` the joint vector comes from combiner `i` alone.
pub struct ModelScorer<'a> {
    model: &'a Model,
    probe: Option<usize>,
    cache: Mutex<HashMap<Vec<TokenId>, Vec<f64>>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self::with_probe(model, None)
    }

    pub fn with_probe(model: &'a Model, probe: Option<usize>) -> Self {
        ModelScorer {
            model,
            probe,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn joint(&self, example: &Example) -> Result<Tensor> {
        let mut s = Session::inference(&self.model.params);
        let j = self.model.joint_or_probe(&mut s, example, self.probe)?;
        Ok(s.tape.value(j).clone())
    }

    /// Joint vector and gate record of the gated path.
    pub fn joint_and_gate(&self, example: &Example) -> Result<(Tensor, GateRecord)> {
        let mut s = Session::inference(&self.model.params);
        let (j, g) = self.model.joint(&mut s, example)?;
        Ok((s.tape.value(j).clone(), g))
    }

    fn candidate_vec(&self, text: &[TokenId]) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(text) {
            return Ok(v.clone());
        }
        let mut s = Session::inference(&self.model.params);
        let c = self.model.candidate_encoder.encode_pooled(&mut s, text)?;
        let v = s.tape.value(c).data().to_vec();
        self.cache
            .lock()
            .expect("cache lock")
            .insert(text.to_vec(), v.clone());
        Ok(v)
    }
}

impl RankScorer for ModelScorer<'_> {
    fn score_candidates(&self, example: &Example, candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let joint = self.joint(example)?;
        let d = joint.numel();
        let mut data = Vec::with_capacity(candidates.len() * d);
        for c in candidates {
            data.extend(self.candidate_vec(c)?);
        }
        let cands = Tensor::new(vec![candidates.len(), d], data)?;
        rank_candidates(&joint, &cands)
    }
}

impl AnswerScorer for ModelScorer<'_> {
    fn answer_logits(&self, example: &Example) -> Result<Vec<f64>> {
        let joint = self.joint(example)?;
        self.model.classify_values(&joint)
    }
}

/// Fraction of examples whose gold candidate gets the top score (ties to the
/// lowest index) within the task's fixed-size candidate pool.
pub fn recall_at_1<S: RankScorer>(scorer: &S, dataset: &TaskDataset, split: Split, seed: u64) -> Result<f64> {
    recall_at_k(scorer, dataset, split, seed, 1)
}

/// Fraction of examples whose gold lands in the top `k` positions.
pub fn recall_at_k<S: RankScorer>(
    scorer: &S,
    dataset: &TaskDataset,
    split: Split,
    seed: u64,
    k: usize,
) -> Result<f64> {
    if !dataset.head().ranks() {
        return Err(Error::Config(format!(
            "task `{}` has no ranking head",
            dataset.name()
        )));
    }
    let examples = dataset.split(split);
    if examples.is_empty() {
        return Err(Error::Domain(format!(
            "task `{}` has an empty {split} split",
            dataset.name()
        )));
    }
    let golds = GoldIndex::new(examples);
    let count = dataset.header.eval_candidate_count;
    let hits = examples
        .par_iter()
        .map(|ex| {
            let pool = golds.pool(ex, count, seed)?;
            let scores = scorer.score_candidates(ex, &pool.candidates)?;
            let gold = scores[pool.gold_index];
            // rank = number of candidates that beat the gold under lowest-index tie-breaking
            let better = scores
                .iter()
                .enumerate()
                .filter(|&(i, &s)| s > gold || (s == gold && i < pool.gold_index))
                .count();
            Ok(usize::from(better < k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Mean credit of the arg-max answer (ties to the lowest index).
pub fn classification_accuracy<S: AnswerScorer>(scorer: &S, dataset: &TaskDataset, split: Split) -> Result<f64> {
    if !dataset.head().classifies() {
        return Err(Error::Config(format!(
            "task `{}` has no classification head",
            dataset.name()
        )));
    }
    let examples = dataset.split(split);
    if examples.is_empty() {
        return Err(Error::Domain(format!(
            "task `{}` has an empty {split} split",
            dataset.name()
        )));
    }
    let credits = examples
        .par_iter()
        .map(|ex| {
            let logits = scorer.answer_logits(ex)?;
            let pred = argmax(&logits).ok_or_else(|| Error::Config("empty answer vocabulary".into()))?;
            let target = ex.answer.as_ref().ok_or_else(|| Error::Validation {
                id: ex.id.clone(),
                msg: "no answer target".into(),
            })?;
            Ok(target.credit(pred))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(credits.iter().sum::<f64>() / examples.len() as f64)
}

/// The validation metric of a task trained with `mode`: accuracy when a
/// classification head is trained, Recall@1 otherwise.
pub fn task_metric(model: &Model, dataset: &TaskDataset, mode: HeadKind, split: Split, seed: u64) -> Result<f64> {
    task_metric_with(&ModelScorer::new(model), dataset, mode, split, seed)
}

pub fn task_metric_with(
    scorer: &ModelScorer<'_>,
    dataset: &TaskDataset,
    mode: HeadKind,
    split: Split,
    seed: u64,
) -> Result<f64> {
    if mode.classifies() {
        classification_accuracy(scorer, dataset, split)
    } else {
        recall_at_1(scorer, dataset, split, seed)
    }
}

/// Evaluates every (regime, task) cell; a failing cell is recorded, not fatal.
pub fn transfer_matrix(
    regimes: &[(String, &Model)],
    datasets: &[TaskDataset],
    split: Split,
    seed: u64,
) -> TransferMatrix {
    let tasks = datasets.iter().map(|d| d.name().to_string()).collect();
    let rows = regimes
        .iter()
        .map(|(name, model)| {
            let scorer = ModelScorer::new(model);
            let cells = datasets
                .iter()
                .map(|ds| {
                    let mode = if ds.head().classifies() && model.classifier.is_some() {
                        HeadKind::Classification
                    } else {
                        HeadKind::Ranking
                    };
                    task_metric_with(&scorer, ds, mode, split, seed).map_err(|e| e.to_string())
                })
                .collect();
            TransferRow::new(name.clone(), cells)
        })
        .collect();
    TransferMatrix { tasks, rows }
}

/// Per-style mean gate weights and per-combiner probe metrics.
pub fn gate_report(model: &Model, dataset: &TaskDataset, mode: HeadKind, split: Split, seed: u64) -> Result<GateReport> {
    let n = model.combiner.n_combiners();
    let scorer = ModelScorer::new(model);
    let examples = dataset.split(split);
    let gates = examples
        .par_iter()
        .map(|ex| Ok((ex.style, scorer.joint_and_gate(ex)?.1)))
        .collect::<Result<Vec<_>>>()?;
    let mut sums: std::collections::BTreeMap<u32, (Vec<f64>, usize)> = Default::default();
    for (style, g) in &gates {
        let e = sums.entry(*style).or_insert_with(|| (vec![0.0; n], 0));
        e.0.iter_mut().zip(&g.weights).for_each(|(a, w)| *a += w);
        e.1 += 1;
    }
    let per_style = sums
        .into_iter()
        .map(|(s, (w, c))| (s, w.into_iter().map(|x| x / c as f64).collect()))
        .collect();
    let full_metric = task_metric_with(&scorer, dataset, mode, split, seed)?;
    let probe_metrics = if n > 1 {
        (0..n)
            .map(|i| task_metric_with(&ModelScorer::with_probe(model, Some(i)), dataset, mode, split, seed))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![full_metric]
    };
    Ok(GateReport {
        task: dataset.name().to_string(),
        n_combiners: n,
        per_style_mean_gate: per_style,
        full_metric,
        probe_metrics,
    })
}
