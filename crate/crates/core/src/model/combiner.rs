//! Multimodal fusion: per-type normalisation, type embeddings, and one or
//! more Transformer combiners mixed by a style-conditioned softmax gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{CombinerConfig, FeatureType};
use crate::error::{Error, Result};
use crate::nn::{Embedding, LayerNorm, Linear, TransformerEncoder};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::tensor::Var;

/// One example's encoded inputs, bound to a session's tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub context: Option<Var>,
    pub image_global: Option<Var>,
    pub image_regional: Option<Var>,
    pub style: Var,
}

impl FeatureBundle {
    fn block(&self, t: FeatureType) -> Option<Var> {
        match t {
            FeatureType::Context => self.context,
            FeatureType::ImageGlobal => self.image_global,
            FeatureType::ImageRegional => self.image_regional,
            FeatureType::Style => Some(self.style),
        }
    }

    /// Feature-type tag of every row of the assembled sequence, in `order`.
    pub fn type_tags(&self, s: &Session, order: &[FeatureType]) -> Vec<usize> {
        order
            .iter()
            .filter_map(|&t| self.block(t).map(|v| vec![t.tag(); s.tape.value(v).rows()]))
            .flatten()
            .collect()
    }
}

/// Mixture weights chosen by the gate for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combiner {
    pub config: CombinerConfig,
    /// Per feature type, indexed by [`FeatureType::tag`].
    pub type_norms: Vec<LayerNorm>,
    pub type_embeddings: Embedding,
    pub combiners: Vec<TransformerEncoder>,
    /// Present iff `n_combiners > 1`.
    pub gate: Option<Linear>,
}

impl Combiner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &CombinerConfig,
        d_ff: usize,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Combiner;
        let d = config.d_model;
        let type_norms = (0..config.n_feature_types)
            .map(|i| LayerNorm::new(store, &format!("combiner.type_norm{i}"), g, d))
            .collect();
        let type_embeddings = Embedding::new(store, rng, "combiner.type_embeddings", g, config.n_feature_types, d, 0.5);
        let combiners = (0..config.n_combiners)
            .map(|i| {
                TransformerEncoder::new(
                    store,
                    rng,
                    &format!("combiner.mmc{i}"),
                    g,
                    config.layers_per_combiner,
                    config.n_heads,
                    d,
                    d_ff,
                )
            })
            .collect::<Result<_>>()?;
        let gate = (config.n_combiners > 1)
            .then(|| Linear::zeroed(store, "combiner.gate", g, d, config.n_combiners));
        Ok(Combiner {
            config: config.clone(),
            type_norms,
            type_embeddings,
            combiners,
            gate,
        })
    }

    pub fn n_combiners(&self) -> usize {
        self.combiners.len()
    }

    /// Normalises each present family with its own layer norm, adds its type
    /// embedding to every row, and concatenates the families in the configured
    /// order.
    pub fn assemble_sequence(&self, s: &mut Session, bundle: &FeatureBundle) -> Result<Var> {
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(4);
        for &t in &self.config.feature_order {
            let Some(x) = bundle.block(t) else { continue };
            let xv = s.tape.value(x);
            if xv.rank() != 2 || xv.cols() != d {
                return Err(Error::Dimension(format!(
                    "{t:?} block {:?} does not have width {d}",
                    xv.shape()
                )));
            }
            let rows = xv.rows();
            let normed = self.type_norms[t.tag()].forward(s, x)?;
            let tags = vec![t.tag(); rows];
            let emb = self.type_embeddings.forward(s, &tags)?;
            parts.push(s.tape.add(normed, emb)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            s.tape.concat_rows(&parts)
        }
    }

    /// Runs combiner `index` over `seq` and mean-pools the rows to `1×d_model`.
    pub fn mmc_forward(&self, s: &mut Session, seq: Var, index: usize) -> Result<Var> {
        let enc = self.combiners.get(index).ok_or_else(|| {
            Error::Index(format!(
                "combiner index {index} out of range for {} combiners",
                self.combiners.len()
            ))
        })?;
        let h = enc.forward(s, seq)?;
        let m = s.tape.mean(h, 0)?;
        s.tape.reshape(m, vec![1, self.config.d_model])
    }

    /// Gate weights `softmax(style · W + b)` as a `1×N` row.
    pub fn gate_weights(&self, s: &mut Session, style_vec: Var) -> Result<Var> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::Config("single combiner has no gate".into()))?;
        let sv = s.tape.value(style_vec);
        if sv.numel() != self.config.d_model {
            return Err(Error::Dimension(format!(
                "style vector {:?} does not have width {}",
                sv.shape(),
                self.config.d_model
            )));
        }
        let q = s.tape.reshape(style_vec, vec![1, self.config.d_model])?;
        let logits = gate.forward(s, q)?;
        s.tape.softmax(logits, 1)
    }

    /// Gated mixture of all combiners. With one combiner the gate is `[1.0]`
    /// and the joint vector is exactly that combiner's output.
    pub fn ammc_forward(&self, s: &mut Session, seq: Var, style_vec: Var) -> Result<(Var, GateRecord)> {
        if self.combiners.len() == 1 {
            let sv = s.tape.value(style_vec);
            if sv.numel() != self.config.d_model {
                return Err(Error::Dimension(format!(
                    "style vector {:?} does not have width {}",
                    sv.shape(),
                    self.config.d_model
                )));
            }
            let joint = self.mmc_forward(s, seq, 0)?;
            return Ok((joint, GateRecord { weights: vec![1.0] }));
        }
        let outputs = (0..self.combiners.len())
            .map(|i| self.mmc_forward(s, seq, i))
            .collect::<Result<Vec<_>>>()?;
        let stacked = s.tape.concat_rows(&outputs)?;
        let weights = self.gate_weights(s, style_vec)?;
        let joint = s.tape.matmul(weights, stacked)?;
        let record = GateRecord {
            weights: s.tape.value(weights).data().to_vec(),
        };
        Ok((joint, record))
    }

    /// Output of combiner `index` alone, bypassing the gate.
    pub fn probe_single_combiner(&self, s: &mut Session, seq: Var, index: usize) -> Result<Var> {
        self.mmc_forward(s, seq, index)
    }
}
