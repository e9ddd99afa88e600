//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f64` blobs in header order: selected
//! parameters, and when training state is present, live parameters followed
//! by the Adam first and second moments of every parameter.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::history::MetricHistory;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamGroup, ParamStore};
use crate::util::{sha256_hex, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Update counts and summed batch losses per task for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub updates: BTreeMap<String, u64>,
    pub loss_sum: BTreeMap<String, f64>,
}

impl EpochStats {
    pub fn mean_loss(&self, task: &str) -> Option<f64> {
        let n = *self.updates.get(task)?;
        Some(self.loss_sum[task] / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMark {
    pub step: u64,
    pub score: f64,
}

/// Everything needed to continue a run exactly where it stopped. Random
/// streams are keyed by `(seed, step)`, so `step` is the whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub adam: Vec<AdamState>,
    pub best: Option<BestMark>,
    pub bad_evals: usize,
    pub finished: bool,
    pub epochs: Vec<EpochStats>,
    pub initial_encoder_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// The selected (best) parameters.
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub tasks: Vec<String>,
    pub history: MetricHistory,
    pub selected_step: Option<u64>,
    pub state: Option<TrainState>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    best: Option<BestMark>,
    bad_evals: usize,
    finished: bool,
    epochs: Vec<EpochStats>,
    initial_encoder_digest: String,
    adam_config: AdamConfig,
    adam_steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    tasks: Vec<String>,
    history: MetricHistory,
    selected_step: Option<u64>,
    metadata: BTreeMap<String, String>,
    params: Vec<ParamEntry>,
    state: Option<StateHeader>,
}

/// SHA-256 over the bytes of every encoder-group parameter.
pub fn encoder_digest(params: &ParamStore) -> String {
    let mut bytes = Vec::new();
    for (_, p) in params.iter().filter(|(_, p)| p.group.is_encoder()) {
        p.tensor.data().iter().for_each(|x| bytes.extend(x.to_le_bytes()));
    }
    sha256_hex(&bytes)
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    xs.iter().for_each(|x| out.extend(x.to_le_bytes()));
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, dst: &mut [f64]) -> Result<()> {
        let raw = self.take(dst.len() * 8)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self
            .model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.tensor.shape().to_vec(),
            })
            .collect();
        let state = self.state.as_ref().map(|s| StateHeader {
            step: s.step,
            best: s.best,
            bad_evals: s.bad_evals,
            finished: s.finished,
            epochs: s.epochs.clone(),
            initial_encoder_digest: s.initial_encoder_digest.clone(),
            adam_config: s.adam.first().map(|a| a.config).unwrap_or_default(),
            adam_steps: s.adam.iter().map(|a| a.step).collect(),
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            tasks: self.tasks.clone(),
            history: self.history.clone(),
            selected_step: self.selected_step,
            metadata: self.metadata.clone(),
            params,
            state,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for (_, p) in self.model.params.iter() {
            put_f64s(&mut out, p.tensor.data());
        }
        if let Some(s) = &self.state {
            if s.params.len() != self.model.params.len() || s.adam.len() != s.params.len() {
                return Err(Error::Config("training state does not match the model layout".into()));
            }
            for (_, p) in s.params.iter() {
                put_f64s(&mut out, p.tensor.data());
            }
            for a in &s.adam {
                put_f64s(&mut out, &a.m);
            }
            for a in &s.adam {
                put_f64s(&mut out, &a.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Compatibility("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(c.take(len)?)
            .map_err(|e| Error::Compatibility(format!("checkpoint header: {e}")))?;
        let mut model = Model::new(header.model_config.clone(), 0)?;
        if model.params.len() != header.params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} parameters, the configured model has {}",
                header.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (&id, e) in ids.iter().zip(&header.params) {
            let p = model.params.get(id);
            if p.name != e.name || p.tensor.shape() != e.shape.as_slice() || p.group != e.group {
                return Err(Error::Compatibility(format!(
                    "checkpoint parameter `{}` {:?} does not match model parameter `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            c.f64s(model.params.tensor_mut(id).data_mut())?;
        }
        let state = match header.state {
            None => None,
            Some(h) => {
                let mut params = model.params.clone();
                for &id in &ids {
                    c.f64s(params.tensor_mut(id).data_mut())?;
                }
                if h.adam_steps.len() != ids.len() {
                    return Err(Error::Compatibility("optimizer state does not match parameters".into()));
                }
                let mut adam: Vec<AdamState> = ids
                    .iter()
                    .zip(&h.adam_steps)
                    .map(|(&id, &step)| {
                        let mut a = AdamState::new(params.tensor(id).numel(), h.adam_config);
                        a.step = step;
                        a
                    })
                    .collect();
                for a in adam.iter_mut() {
                    c.f64s(&mut a.m)?;
                }
                for a in adam.iter_mut() {
                    c.f64s(&mut a.v)?;
                }
                Some(TrainState {
                    step: h.step,
                    params,
                    adam,
                    best: h.best,
                    bad_evals: h.bad_evals,
                    finished: h.finished,
                    epochs: h.epochs,
                    initial_encoder_digest: h.initial_encoder_digest,
                })
            }
        };
        if c.pos != bytes.len() {
            return Err(Error::Compatibility(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint {
            model,
            train_config: header.train_config,
            tasks: header.tasks,
            history: header.history,
            selected_step: header.selected_step,
            state,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// A checkpoint holding just a model, with no training record.
    pub fn from_model(model: Model) -> Self {
        Checkpoint {
            model,
            train_config: None,
            tasks: Vec::new(),
            history: MetricHistory::default(),
            selected_step: None,
            state: None,
            metadata: BTreeMap::new(),
        }
    }
}
