use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::EarlyStop;
use crate::error::{Error, Result};

/// Validation metrics at one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    pub average: f64,
}

impl Snapshot {
    pub fn new(step: u64, metrics: BTreeMap<String, f64>) -> Self {
        let average = metrics.values().sum::<f64>() / metrics.len().max(1) as f64;
        Snapshot {
            step,
            metrics,
            average,
        }
    }

    /// The criterion column of this snapshot.
    pub fn score(&self, criterion: &EarlyStop) -> Result<f64> {
        match criterion {
            EarlyStop::Average => Ok(self.average),
            EarlyStop::Task(t) => self
                .metrics
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("criterion task `{t}` not in history"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub snapshots: Vec<Snapshot>,
}

impl MetricHistory {
    /// Appends a snapshot; steps must strictly increase.
    pub fn push(&mut self, snap: Snapshot) -> Result<()> {
        if let Some(last) = self.snapshots.last() {
            if snap.step <= last.step {
                return Err(Error::Training(format!(
                    "snapshot step {} does not follow step {}",
                    snap.step, last.step
                )));
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn at(&self, step: u64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.snapshots
            .iter()
            .map(|s| serde_json::to_string(s).expect("snapshot serializes") + "\n")
            .collect()
    }
}

/// Step of the best snapshot under `criterion`; ties go to the earliest step.
pub fn select_checkpoint(history: &MetricHistory, criterion: &EarlyStop) -> Result<u64> {
    let mut best: Option<(u64, f64)> = None;
    for s in &history.snapshots {
        let v = s.score(criterion)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((s.step, v));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| Error::Config("cannot select a checkpoint from an empty history".into()))
}

/// Replays the early-stopping rule over a recorded history. Returns the
/// selected step and the step at which a run with this criterion and
/// patience would have stopped.
pub fn replay_early_stop(history: &MetricHistory, criterion: &EarlyStop, patience: usize) -> Result<(u64, u64)> {
    if patience == 0 {
        return Err(Error::Config("patience must be at least 1".into()));
    }
    let mut best: Option<(u64, f64)> = None;
    let mut bad = 0;
    for s in &history.snapshots {
        let v = s.score(criterion)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((s.step, v));
            bad = 0;
        } else {
            bad += 1;
        }
        if bad >= patience {
            return Ok((best.expect("best set").0, s.step));
        }
    }
    let last = history
        .snapshots
        .last()
        .ok_or_else(|| Error::Config("cannot replay an empty history".into()))?;
    Ok((best.expect("best set").0, last.step))
}
