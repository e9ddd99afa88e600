//! Named parameter registry and the per-pass binding of parameters onto a tape.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

/// Which part of the model a parameter belongs to. Freezing works per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ContextEncoder,
    CandidateEncoder,
    Style,
    ImageAdapter,
    Combiner,
    Classifier,
}

impl ParamGroup {
    /// Text encoders, image adapters and the style table.
    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::ContextEncoder
                | ParamGroup::CandidateEncoder
                | ParamGroup::Style
                | ParamGroup::ImageAdapter
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Parameters in registration order. The order is part of the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(false),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn scalar_count_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Bitwise equality of all parameters selected by `pred`.
    pub fn bit_eq_where(&self, other: &ParamStore, pred: impl Fn(&Param) -> bool) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .filter(|(a, _)| pred(a))
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

/// One differentiable pass: a fresh tape plus lazily bound parameter leaves.
///
/// Parameters are copied onto the tape the first time they are used. Those in
/// a frozen group are bound as constants and never receive a gradient.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    frozen: Vec<ParamGroup>,
    track_grads: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            frozen: Vec::new(),
            track_grads: true,
        }
    }

    /// A session that records no gradients at all (evaluation).
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut s = Self::new(store);
        s.track_grads = false;
        s
    }

    pub fn with_frozen(mut self, groups: &[ParamGroup]) -> Self {
        self.frozen = groups.to_vec();
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let trainable = self.track_grads && !self.frozen.contains(&p.group);
        let v = self.tape.leaf(p.tensor.clone().with_requires_grad(trainable));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound, trainable parameter after `backward`.
    pub fn grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
