use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order in which feature families are concatenated before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    Context,
    ImageGlobal,
    ImageRegional,
    Style,
}

impl FeatureType {
    pub fn tag(self) -> usize {
        self as usize
    }
}

pub const DEFAULT_FEATURE_ORDER: [FeatureType; 4] = [
    FeatureType::Context,
    FeatureType::ImageGlobal,
    FeatureType::ImageRegional,
    FeatureType::Style,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinerConfig {
    /// `1` is a plain combiner; `2..=4` are gated mixtures.
    pub n_combiners: usize,
    pub layers_per_combiner: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_feature_types: usize,
    pub feature_order: Vec<FeatureType>,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            n_combiners: 1,
            layers_per_combiner: 2,
            n_heads: 4,
            d_model: 32,
            n_feature_types: 4,
            feature_order: DEFAULT_FEATURE_ORDER.to_vec(),
        }
    }
}

impl CombinerConfig {
    /// Transformer layers across all combiners.
    pub fn layer_budget(&self) -> usize {
        self.n_combiners * self.layers_per_combiner
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n_combiners) {
            return Err(Error::Config(format!(
                "n_combiners must be in 1..=4, got {}",
                self.n_combiners
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "combiner d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_feature_types != 4 || self.feature_order.len() != 4 {
            return Err(Error::Config(
                "combiner expects exactly four feature types".into(),
            ));
        }
        let mut order = self.feature_order.clone();
        order.sort_by_key(|t| t.tag());
        order.dedup();
        if order.len() != 4 {
            return Err(Error::Config("feature_order repeats a feature type".into()));
        }
        Ok(())
    }
}

/// How the context encoder output reaches the combiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextInput {
    /// One row per token.
    #[default]
    Sequence,
    /// A single mean-pooled row (ablation).
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub style_vocab: usize,
    pub d_img_global: usize,
    pub d_img_regional: usize,
    pub combiner: CombinerConfig,
    #[serde(default)]
    pub context_input: ContextInput,
    /// Accepted for configuration compatibility; only 0.0 is implemented.
    #[serde(default)]
    pub dropout: f64,
    /// Classification answer vocabulary; empty disables the classifier head.
    #[serde(default)]
    pub answers: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            text_layers: 1,
            vocab_size: 200,
            max_len: 32,
            style_vocab: 12,
            d_img_global: 16,
            d_img_regional: 16,
            combiner: CombinerConfig::default(),
            context_input: ContextInput::Sequence,
            dropout: 0.0,
            answers: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// `base` resized to fit `datasets`: style space, image widths, token
    /// range and the shared answer vocabulary of the classifying tasks.
    pub fn fit_to(base: &ModelConfig, datasets: &[crate::data::TaskDataset]) -> Result<ModelConfig> {
        let mut c = base.clone();
        let mut answers: Option<&Vec<String>> = None;
        for ds in datasets {
            let h = &ds.header;
            let top = h.style_space.iter().max().map_or(1, |&s| s as usize + 1);
            c.style_vocab = c.style_vocab.max(top);
            c.d_img_global = h.d_img_global;
            c.d_img_regional = h.d_img_regional;
            let max_tok = ds
                .splits()
                .iter()
                .flat_map(|(_, ex)| ex.iter())
                .flat_map(|e| e.context.iter().chain(e.gold.iter().flatten()))
                .copied()
                .max()
                .unwrap_or(0);
            c.vocab_size = c.vocab_size.max(max_tok as usize + 1);
            if ds.head().classifies() {
                match answers {
                    Some(a) if a != &h.answers => {
                        return Err(Error::Config(format!(
                            "task `{}` has a different answer vocabulary than an earlier task",
                            ds.name()
                        )))
                    }
                    _ => answers = Some(&h.answers),
                }
            }
        }
        c.answers = answers.cloned().unwrap_or_default();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.combiner.validate()?;
        if self.combiner.d_model != self.d_model {
            return Err(Error::Config(format!(
                "combiner width {} differs from model width {}",
                self.combiner.d_model, self.d_model
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.style_vocab == 0 {
            return Err(Error::Config("d_ff, max_len and style_vocab must be positive".into()));
        }
        if self.vocab_size <= crate::data::tokens::FIRST_FREE as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond reserved tokens",
                self.vocab_size
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; use 0.0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.answers.iter().all(|a| seen.insert(a)) {
            return Err(Error::Config("answer vocabulary has duplicate entries".into()));
        }
        Ok(())
    }
}
