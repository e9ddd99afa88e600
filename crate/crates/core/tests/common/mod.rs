#![allow(dead_code)]

pub mod oracle;
pub mod suites;

use ammc::data::{
    generate_synthetic_suite, AnswerTarget, Example, HeadKind, RawImageFeatures, SplitSizes, SyntheticSuiteConfig,
    TaskDataset, TokenId,
};
use ammc::model::heads::{classification_loss, multi_head_loss, ranking_loss};
use ammc::model::{CombinerConfig, Model, ModelConfig};
use ammc::params::Session;
use ammc::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// A model small enough to finite-difference every parameter.
pub fn tiny_config(n_combiners: usize) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        text_layers: 1,
        vocab_size: 12,
        max_len: 6,
        style_vocab: 4,
        d_img_global: 3,
        d_img_regional: 3,
        combiner: CombinerConfig {
            n_combiners,
            layers_per_combiner: 1,
            n_heads: 2,
            d_model: 4,
            ..CombinerConfig::default()
        },
        answers: vec!["a".into(), "b".into(), "c".into()],
        ..ModelConfig::default()
    }
}

/// Replaces every parameter with a random draw so no block (zero gate,
/// unit gains) sits at a special point.
pub fn randomize(model: &mut Model, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.tensor_mut(id).data_mut() {
            *v = r.random_range(-0.8..0.8);
        }
    }
}

pub fn random_example(r: &mut ChaCha8Rng, cfg: &ModelConfig, id: usize) -> Example {
    let tokens = |r: &mut ChaCha8Rng, n: usize| -> Vec<TokenId> {
        (0..n).map(|_| r.random_range(3..cfg.vocab_size as TokenId)).collect()
    };
    let clen = r.random_range(1..=3);
    let glen = r.random_range(1..=3);
    Example {
        id: format!("ex{id}"),
        context: tokens(r, clen),
        image: Some(RawImageFeatures {
            global: (0..cfg.d_img_global).map(|_| r.random_range(-1.0..1.0)).collect(),
            regional: (0..2)
                .map(|_| (0..cfg.d_img_regional).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect(),
        }),
        style: r.random_range(0..cfg.style_vocab as u32),
        gold: Some(tokens(r, glen)),
        answer: Some(AnswerTarget::Index(r.random_range(0..cfg.answers.len()))),
    }
}

/// Batch loss composed directly from the public model pieces.
pub fn batch_loss(model: &Model, s: &mut Session, batch: &[Example], mode: HeadKind, mix: f64) -> Result<Var> {
    let joints = batch
        .iter()
        .map(|e| model.joint(s, e).map(|(j, _)| j))
        .collect::<Result<Vec<_>>>()?;
    let j = s.tape.concat_rows(&joints)?;
    let rank = if mode.ranks() {
        let golds: Vec<Vec<TokenId>> = batch.iter().map(|e| e.gold.clone().unwrap()).collect();
        let g = model.candidates(s, &golds)?;
        Some(ranking_loss(&mut s.tape, j, g)?)
    } else {
        None
    };
    let cls = if mode.classifies() {
        let a = model.n_answers();
        let mut dense = Vec::new();
        for e in batch {
            dense.extend(e.answer.as_ref().unwrap().dense(a)?);
        }
        let logits = model.classify(s, j)?;
        Some(classification_loss(&mut s.tape, logits, &Tensor::new(vec![batch.len(), a], dense)?)?)
    } else {
        None
    };
    multi_head_loss(&mut s.tape, rank, cls, mix)
}

pub fn with_params(model: &Model, values: &[Tensor]) -> Model {
    let mut m = model.clone();
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for (id, t) in ids.into_iter().zip(values) {
        m.params.tensor_mut(id).data_mut().copy_from_slice(t.data());
    }
    m
}

pub fn small_suite(train: usize, seed: u64) -> Vec<TaskDataset> {
    generate_synthetic_suite(&SyntheticSuiteConfig {
        seed,
        sizes: SplitSizes { train, valid: 40, test: 40 },
        ..SyntheticSuiteConfig::default()
    })
    .unwrap()
}

/// A desk model fitted to `tasks`, shrunk so trainer tests run quickly.
pub fn small_model(tasks: &[TaskDataset], n_combiners: usize, seed: u64) -> Model {
    let base = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        combiner: CombinerConfig {
            n_combiners,
            layers_per_combiner: 1,
            n_heads: 2,
            d_model: 16,
            ..CombinerConfig::default()
        },
        ..ModelConfig::default()
    };
    Model::new(ModelConfig::fit_to(&base, tasks).unwrap(), seed).unwrap()
}

/// Bayes-optimal scorer for the synthetic suite: recovers the latent factors
/// by brute force over the clean-image table, then regenerates the text.
pub struct InversionOracle {
    pub world: ammc::data::SyntheticWorld,
    pub task: ammc::data::SyntheticTask,
}

impl InversionOracle {
    pub fn latents(&self, ex: &Example) -> Vec<usize> {
        let c = &self.world.config;
        let img = ex.image.as_ref().expect("synthetic examples carry images");
        let mut best = (f64::INFINITY, Vec::new());
        let total = c.factor_values.pow(c.n_factors as u32);
        for code in 0..total {
            let z: Vec<usize> = (0..c.n_factors).map(|f| (code / c.factor_values.pow(f as u32)) % c.factor_values).collect();
            let clean = self.world.clean_image(&z);
            let d: f64 = clean
                .global
                .iter()
                .zip(&img.global)
                .chain(clean.regional.iter().flatten().zip(img.regional.iter().flatten()))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.0 {
                best = (d, z);
            }
        }
        best.1
    }

    fn question(&self, ex: &Example) -> usize {
        (0..self.world.config.n_factors)
            .find(|&q| self.world.qa_context(q) == ex.context)
            .expect("context names a factor")
    }

    pub fn gold(&self, ex: &Example) -> Vec<TokenId> {
        use ammc::data::SyntheticTask::*;
        let z = self.latents(ex);
        match self.task {
            Caption => self.world.caption_gold(&z),
            Chat => {
                let t = (0..self.world.config.n_styles)
                    .find(|&t| self.world.trait_style(t) == ex.style)
                    .expect("chat style is a trait");
                self.world.chat_gold(t, &z)
            }
            Qa => self.world.qa_gold(self.question(ex), &z),
        }
    }
}

impl ammc::eval::RankScorer for InversionOracle {
    fn score_candidates(&self, ex: &Example, candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let g = self.gold(ex);
        Ok(candidates.iter().map(|c| f64::from(u8::from(*c == g))).collect())
    }
}

impl ammc::eval::AnswerScorer for InversionOracle {
    fn answer_logits(&self, ex: &Example) -> Result<Vec<f64>> {
        let a = self.world.qa_answer(self.question(ex), &self.latents(ex));
        Ok((0..self.world.n_answers()).map(|i| f64::from(u8::from(i == a))).collect())
    }
}
