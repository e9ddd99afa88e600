//! Text, style and image-feature encoders feeding the combiner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokens, RawImageFeatures, TokenId};
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, TransformerEncoder};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::tensor::{Tensor, Var};

const EMBED_SCALE: f64 = 0.5;

/// Token + learned absolute position embeddings followed by a Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub tokens: Embedding,
    pub positions: Embedding,
    pub encoder: TransformerEncoder,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        vocab: usize,
        max_len: usize,
        layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(TextEncoder {
            tokens: Embedding::new(store, rng, &format!("{name}.tokens"), group, vocab, d_model, EMBED_SCALE),
            positions: Embedding::new(store, rng, &format!("{name}.positions"), group, max_len, d_model, EMBED_SCALE),
            encoder: TransformerEncoder::new(store, rng, &format!("{name}.encoder"), group, layers, n_heads, d_model, d_ff)?,
        })
    }

    /// Maps out-of-vocabulary ids to UNK and keeps the last `max_len` tokens.
    fn prepare(&self, ids: &[TokenId]) -> Vec<usize> {
        let keep = ids.len().saturating_sub(self.positions.vocab);
        ids[keep..]
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < self.tokens.vocab {
                    t
                } else {
                    tokens::UNK as usize
                }
            })
            .collect()
    }

    /// Per-token encodings, `L×d_model`.
    pub fn encode_tokens(&self, s: &mut Session, ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Domain("cannot encode an empty token sequence".into()));
        }
        let ids = self.prepare(ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = self.tokens.forward(s, &ids)?;
        let pos = self.positions.forward(s, &positions)?;
        let x = s.tape.add(tok, pos)?;
        self.encoder.forward(s, x)
    }

    /// Mean of the per-token encodings, `1×d_model`.
    pub fn encode_pooled(&self, s: &mut Session, ids: &[TokenId]) -> Result<Var> {
        let h = self.encode_tokens(s, ids)?;
        let m = s.tape.mean(h, 0)?;
        s.tape.reshape(m, vec![1, self.encoder.d_model])
    }
}

/// Context encoding that keeps one row per token.
pub fn encode_context(enc: &TextEncoder, s: &mut Session, ids: &[TokenId]) -> Result<Var> {
    enc.encode_tokens(s, ids)
}

/// One mean-pooled row per candidate, `C×d_model`.
pub fn encode_candidates(enc: &TextEncoder, s: &mut Session, candidates: &[Vec<TokenId>]) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::Domain("empty candidate list".into()));
    }
    let rows = candidates
        .iter()
        .map(|c| enc.encode_pooled(s, c))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        s.tape.concat_rows(&rows)
    }
}

/// Style trait (or per-task token) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEncoder {
    pub table: Embedding,
}

impl StyleEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, style_vocab: usize, d_model: usize) -> Self {
        StyleEncoder {
            table: Embedding::new(store, rng, "style", ParamGroup::Style, style_vocab, d_model, EMBED_SCALE),
        }
    }

    /// `1×d_model` row for `style_id`.
    pub fn encode(&self, s: &mut Session, style_id: u32) -> Result<Var> {
        self.table.forward(s, &[style_id as usize])
    }
}

/// Independent linear projections of precomputed image features into `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAdapter {
    pub global: Linear,
    pub regional: Linear,
}

impl ImageAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_img_global: usize,
        d_img_regional: usize,
        d_model: usize,
    ) -> Self {
        ImageAdapter {
            global: Linear::new(store, rng, "image.global", ParamGroup::ImageAdapter, d_img_global, d_model),
            regional: Linear::new(store, rng, "image.regional", ParamGroup::ImageAdapter, d_img_regional, d_model),
        }
    }

    /// Projects each present feature family; absent families stay absent.
    pub fn adapt(&self, s: &mut Session, raw: &RawImageFeatures) -> Result<(Option<Var>, Option<Var>)> {
        if !raw.all_finite() {
            return Err(Error::Domain("non-finite image feature".into()));
        }
        let global = if raw.global.is_empty() {
            None
        } else {
            if raw.global.len() != self.global.d_in {
                return Err(Error::Dimension(format!(
                    "global image feature width {} does not match {}",
                    raw.global.len(),
                    self.global.d_in
                )));
            }
            let x = s.tape.constant(Tensor::new(vec![1, raw.global.len()], raw.global.clone())?);
            Some(self.global.forward(s, x)?)
        };
        let regional = if raw.regional.is_empty() {
            None
        } else {
            if raw.regional.iter().any(|r| r.len() != self.regional.d_in) {
                return Err(Error::Dimension(format!(
                    "regional image feature width does not match {}",
                    self.regional.d_in
                )));
            }
            let x = s.tape.constant(Tensor::from_rows(&raw.regional)?);
            Some(self.regional.forward(s, x)?)
        };
        Ok((global, regional))
    }
}
