//! Layers shared by the text encoders and the combiners.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w + b` for `x: n×d_in`, `w: d_in×d_out`, `b: d_out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Rows of `table` selected by `ids`.
pub fn embedding_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(table, ids)
}

fn init_weight<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Tensor {
    Tensor::uniform(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init_weight(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    /// All-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), group, Tensor::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        linear(&mut s.tape, x, w, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    /// Table initialised uniformly in `[-scale, scale)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        vocab: usize,
        dim: usize,
        scale: f64,
    ) -> Self {
        let table = store.add(name, group, Tensor::uniform(&[vocab, dim], scale, rng));
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::Index(format!(
                "embedding id {bad} out of range for vocabulary of {}",
                self.vocab
            )));
        }
        let t = s.param(self.table);
        embedding_lookup(&mut s.tape, t, ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::ones(&[dim]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        check_heads(d_model, n_heads)?;
        Ok(MultiHeadSelfAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), group, d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), group, d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), group, d_model, d_model),
            out: Linear::new(store, rng, &format!("{name}.out"), group, d_model, d_model),
            n_heads,
            d_model,
        })
    }

    /// Scaled dot-product attention over all rows of `x`. When `probe` is
    /// given, each head's `L×L` weight matrix is pushed onto it.
    pub fn forward(&self, s: &mut Session, x: Var, mut probe: Option<&mut Vec<Tensor>>) -> Result<Var> {
        check_heads(self.d_model, self.n_heads)?;
        let width = s.tape.value(x).cols();
        if width != self.d_model {
            return Err(Error::Dimension(format!(
                "attention input width {width} does not match d_model {}",
                self.d_model
            )));
        }
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = s.tape.slice_cols(q, lo, hi)?;
            let kh = s.tape.slice_cols(k, lo, hi)?;
            let vh = s.tape.slice_cols(v, lo, hi)?;
            let kt = s.tape.transpose(kh)?;
            let scores = s.tape.matmul(qh, kt)?;
            let scores = s.tape.scale(scores, scale)?;
            let weights = s.tape.softmax(scores, 1)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(s.tape.value(weights).clone().with_requires_grad(false));
            }
            heads.push(s.tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape.concat_cols(&heads)?
        };
        self.out.forward(s, joined)
    }
}

fn check_heads(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by n_heads {n_heads}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

/// Post-norm Transformer encoder stack with GELU feed-forward blocks and no
/// embedding layer or positional signal of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl TransformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        check_heads(d_model, n_heads)?;
        if d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadSelfAttention::new(store, rng, &format!("{p}.attn"), group, d_model, n_heads)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), group, d_model),
                    ff_in: Linear::new(store, rng, &format!("{p}.ff_in"), group, d_model, d_ff),
                    ff_out: Linear::new(store, rng, &format!("{p}.ff_out"), group, d_ff, d_model),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), group, d_model),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder {
            layers,
            n_heads,
            d_model,
            d_ff,
        })
    }

    /// Number of scalar parameters in an encoder of the given shape.
    pub fn param_count(n_layers: usize, d_model: usize, d_ff: usize) -> usize {
        let attn = 4 * Linear::param_count(d_model, d_model);
        let norms = 2 * 2 * d_model;
        let ff = Linear::param_count(d_model, d_ff) + Linear::param_count(d_ff, d_model);
        n_layers * (attn + norms + ff)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.run(s, x, None)
    }

    /// Forward pass that also returns every head's attention weights,
    /// indexed `[layer][head]`.
    pub fn forward_inspect(&self, s: &mut Session, x: Var) -> Result<(Var, Vec<Vec<Tensor>>)> {
        let mut all = Vec::with_capacity(self.layers.len());
        let out = self.run(s, x, Some(&mut all))?;
        Ok((out, all))
    }

    fn run(&self, s: &mut Session, x: Var, mut probe: Option<&mut Vec<Vec<Tensor>>>) -> Result<Var> {
        let width = s.tape.value(x).cols();
        if s.tape.value(x).rank() != 2 || width != self.d_model {
            return Err(Error::Dimension(format!(
                "encoder input {:?} does not have width d_model {}",
                s.tape.value(x).shape(),
                self.d_model
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let mut weights = Vec::new();
            let a = layer
                .attn
                .forward(s, h, probe.is_some().then_some(&mut weights))?;
            let r = s.tape.add(h, a)?;
            let h1 = layer.norm1.forward(s, r)?;
            let f = layer.ff_in.forward(s, h1)?;
            let f = s.tape.gelu(f)?;
            let f = layer.ff_out.forward(s, f)?;
            let r = s.tape.add(h1, f)?;
            h = layer.norm2.forward(s, r)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(weights);
            }
        }
        Ok(h)
    }
}
