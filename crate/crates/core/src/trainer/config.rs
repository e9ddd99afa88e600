use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::HeadKind;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

/// Which validation column drives checkpoint selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EarlyStop {
    /// Unweighted mean over tasks.
    Average,
    Task(String),
}

impl FromStr for EarlyStop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "average" {
            return Ok(EarlyStop::Average);
        }
        match s.strip_prefix("task:") {
            Some(name) if !name.is_empty() => Ok(EarlyStop::Task(name.to_string())),
            _ => Err(Error::Config(format!(
                "unknown early-stop criterion `{s}`; expected `average` or `task:<name>`"
            ))),
        }
    }
}

impl TryFrom<String> for EarlyStop {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EarlyStop> for String {
    fn from(e: EarlyStop) -> String {
        e.to_string()
    }
}

impl fmt::Display for EarlyStop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EarlyStop::Average => f.write_str("average"),
            EarlyStop::Task(t) => write!(f, "task:{t}"),
        }
    }
}

/// Training run settings.
///
/// An epoch is `steps_per_epoch` scheduler rounds, not a dataset pass. The
/// batch size default of 32 is a desk-scale choice; large-scale setups use
/// 256 or 512.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub early_stop: EarlyStop,
    pub freeze_encoders: bool,
    /// Per-task head override; tasks not listed train with their dataset's head.
    pub head_modes: BTreeMap<String, HeadKind>,
    /// Weight of the classification loss when both heads train.
    pub mix: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Also evaluate the starting parameters at step 0.
    pub eval_at_start: bool,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 10,
            steps_per_epoch: 200,
            patience: 3,
            early_stop: EarlyStop::Average,
            freeze_encoders: false,
            head_modes: BTreeMap::new(),
            mix: 0.5,
            seed: 0,
            eval_every: 100,
            eval_at_start: false,
            max_steps: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks the settings against the task names they will run on.
    pub fn validate(&self, tasks: &[&str]) -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::Config("no tasks to train on".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].contains(t) {
                return Err(Error::Config(format!("task `{t}` listed twice")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.steps_per_epoch < tasks.len() {
            return Err(Error::Config(format!(
                "steps_per_epoch {} is smaller than the task count {}",
                self.steps_per_epoch,
                tasks.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Config(format!("mix {} outside [0, 1]", self.mix)));
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return Err(Error::Config("adam lr and eps must be positive".into()));
        }
        if let EarlyStop::Task(t) = &self.early_stop {
            if !tasks.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "early-stop task `{t}` is not among the tasks [{}]",
                    tasks.join(", ")
                )));
            }
        }
        for name in self.head_modes.keys() {
            if !tasks.contains(&name.as_str()) {
                return Err(Error::Config(format!("head mode given for unknown task `{name}`")));
            }
        }
        Ok(())
    }
}
