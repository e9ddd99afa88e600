//! The full model: two text encoders, a style table, image adapters, the
//! multimodal combiner(s) and the output heads.

pub mod combiner;
pub mod config;
pub mod encoders;
pub mod heads;

pub use combiner::{Combiner, FeatureBundle, GateRecord};
pub use config::{CombinerConfig, ContextInput, FeatureType, ModelConfig};
pub use encoders::{encode_candidates, encode_context, ImageAdapter, StyleEncoder, TextEncoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, TokenId};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub context_encoder: TextEncoder,
    pub candidate_encoder: TextEncoder,
    pub style: StyleEncoder,
    pub image: ImageAdapter,
    pub combiner: Combiner,
    pub classifier: Option<Linear>,
}

impl Model {
    /// Builds a freshly initialised model. Identical `(config, seed)` pairs
    /// give bit-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let context_encoder = TextEncoder::new(
            &mut params,
            &mut rng,
            "context",
            ParamGroup::ContextEncoder,
            c.vocab_size,
            c.max_len,
            c.text_layers,
            c.n_heads,
            c.d_model,
            c.d_ff,
        )?;
        let candidate_encoder = TextEncoder::new(
            &mut params,
            &mut rng,
            "candidate",
            ParamGroup::CandidateEncoder,
            c.vocab_size,
            c.max_len,
            c.text_layers,
            c.n_heads,
            c.d_model,
            c.d_ff,
        )?;
        let style = StyleEncoder::new(&mut params, &mut rng, c.style_vocab, c.d_model);
        let image = ImageAdapter::new(&mut params, &mut rng, c.d_img_global, c.d_img_regional, c.d_model);
        let combiner = Combiner::new(&mut params, &mut rng, &c.combiner, c.d_ff)?;
        let classifier = (!c.answers.is_empty()).then(|| {
            Linear::new(
                &mut params,
                &mut rng,
                "classifier",
                ParamGroup::Classifier,
                c.d_model,
                c.answers.len(),
            )
        });
        Ok(Model {
            config,
            params,
            context_encoder,
            candidate_encoder,
            style,
            image,
            combiner,
            classifier,
        })
    }

    pub fn n_answers(&self) -> usize {
        self.config.answers.len()
    }

    /// Encodes one example's inputs into a feature bundle.
    pub fn bundle(&self, s: &mut Session, ex: &Example) -> Result<FeatureBundle> {
        let context = match self.config.context_input {
            config::ContextInput::Sequence => encode_context(&self.context_encoder, s, &ex.context)?,
            config::ContextInput::Pooled => self.context_encoder.encode_pooled(s, &ex.context)?,
        };
        let (image_global, image_regional) = match &ex.image {
            Some(raw) => self.image.adapt(s, raw)?,
            None => (None, None),
        };
        let style = self.style.encode(s, ex.style)?;
        Ok(FeatureBundle {
            context: Some(context),
            image_global,
            image_regional,
            style,
        })
    }

    /// Joint context vector (`1×d_model`) and the gate that produced it.
    pub fn joint(&self, s: &mut Session, ex: &Example) -> Result<(Var, GateRecord)> {
        let bundle = self.bundle(s, ex)?;
        let seq = self.combiner.assemble_sequence(s, &bundle)?;
        self.combiner.ammc_forward(s, seq, bundle.style)
    }

    /// Joint vector from combiner `index` alone.
    pub fn probe_joint(&self, s: &mut Session, ex: &Example, index: usize) -> Result<Var> {
        let bundle = self.bundle(s, ex)?;
        let seq = self.combiner.assemble_sequence(s, &bundle)?;
        self.combiner.probe_single_combiner(s, seq, index)
    }

    /// Joint vector through the gate, or through one combiner when `probe` is set.
    pub fn joint_or_probe(&self, s: &mut Session, ex: &Example, probe: Option<usize>) -> Result<Var> {
        match probe {
            None => Ok(self.joint(s, ex)?.0),
            Some(i) => self.probe_joint(s, ex, i),
        }
    }

    pub fn candidates(&self, s: &mut Session, candidates: &[Vec<TokenId>]) -> Result<Var> {
        encode_candidates(&self.candidate_encoder, s, candidates)
    }

    /// Answer logits for a batch of joint vectors, `B×A`.
    pub fn classify(&self, s: &mut Session, joints: Var) -> Result<Var> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        head.forward(s, joints)
    }

    /// Encoder groups, frozen by the freeze switch.
    pub fn encoder_groups() -> [ParamGroup; 4] {
        [
            ParamGroup::ContextEncoder,
            ParamGroup::CandidateEncoder,
            ParamGroup::Style,
            ParamGroup::ImageAdapter,
        ]
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn load_params_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Compatibility(format!(
                "parameter count {} does not match {}",
                other.len(),
                self.params.len()
            )));
        }
        for ((id, mine), (_, theirs)) in self.params.clone().iter().zip(other.iter()) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            self.params
                .tensor_mut(id)
                .data_mut()
                .copy_from_slice(theirs.tensor.data());
        }
        Ok(())
    }

    /// Values-only classification of one joint vector.
    pub fn classify_values(&self, joint: &Tensor) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let j = s.tape.constant(joint.reshaped(vec![1, joint.numel()])?);
        let l = self.classify(&mut s, j)?;
        Ok(s.tape.value(l).data().to_vec())
    }
}
