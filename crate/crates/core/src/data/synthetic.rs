//! Synthetic multimodal task suite.
//!
//! Every image is generated from a vector of discrete latent factors
//! `z ∈ [K]^F`. Its global feature is a noisy sum of per-factor vectors and
//! its regional rows are noisy per-factor vectors, one region per factor.
//! The three tasks read those latents back through text:
//!
//! * `caption` (ranking): the gold lists every factor's value word, in factor order.
//! * `chat` (ranking): the gold depends on the speaker's style trait as well
//!   as on the image, and the context is unrelated small talk.
//! * `qa` (classification and ranking): the context asks about a pair of
//!   factors; the answer names both values.
//!
//! The value words are shared by all three tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{
    tokens, AnswerTarget, DatasetHeader, Example, HeadKind, RawImageFeatures, TaskDataset, TokenId,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Caption,
    Chat,
    Qa,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Caption => "caption",
            SyntheticTask::Chat => "chat",
            SyntheticTask::Qa => "qa",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            SyntheticTask::Caption | SyntheticTask::Chat => HeadKind::Ranking,
            SyntheticTask::Qa => HeadKind::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSuiteConfig {
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
    pub sizes: SplitSizes,
    /// Per-task size overrides keyed by task name.
    pub task_sizes: BTreeMap<String, SplitSizes>,
    pub vocab_size: usize,
    pub d_img: usize,
    pub n_styles: usize,
    /// Number of latent factors `F`.
    pub n_factors: usize,
    /// Values per factor `K`.
    pub factor_values: usize,
    /// Regional rows per image; the first `F` carry one factor each.
    pub regions: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub ranking_candidates: usize,
}

impl Default for SyntheticSuiteConfig {
    fn default() -> Self {
        SyntheticSuiteConfig {
            seed: 0,
            tasks: vec![SyntheticTask::Caption, SyntheticTask::Chat, SyntheticTask::Qa],
            sizes: SplitSizes {
                train: 2000,
                valid: 200,
                test: 200,
            },
            task_sizes: BTreeMap::new(),
            vocab_size: 200,
            d_img: 16,
            n_styles: 8,
            n_factors: 4,
            factor_values: 4,
            regions: 4,
            noise: 0.1,
            ranking_candidates: 20,
        }
    }
}

/// Reserved noise words beyond the structured vocabulary.
pub const MIN_NOISE_WORDS: usize = 8;

/// Token layout of the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVocab {
    pub n_factors: usize,
    pub factor_values: usize,
    pub n_styles: usize,
    pub vocab_size: usize,
}

impl SyntheticVocab {
    pub fn prompt(&self, task: SyntheticTask) -> TokenId {
        tokens::FIRST_FREE + task as TokenId
    }

    fn factor_base(&self) -> usize {
        tokens::FIRST_FREE as usize + 3
    }

    pub fn factor_name(&self, f: usize) -> TokenId {
        (self.factor_base() + f) as TokenId
    }

    pub fn value_word(&self, k: usize) -> TokenId {
        (self.factor_base() + self.n_factors + k) as TokenId
    }

    pub fn mood_word(&self, style_trait: usize, k: usize) -> TokenId {
        (self.factor_base() + self.n_factors + self.factor_values + style_trait * self.factor_values + k) as TokenId
    }

    pub fn first_noise(&self) -> usize {
        self.factor_base() + self.n_factors + self.factor_values + self.n_styles * self.factor_values
    }

    pub fn noise_words(&self) -> std::ops::Range<usize> {
        self.first_noise()..self.vocab_size
    }
}

/// Hidden generative tables plus the text-generating functions.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SyntheticSuiteConfig,
    pub vocab: SyntheticVocab,
    /// `[factor][value]` → global feature contribution.
    pub global_table: Vec<Vec<Vec<f64>>>,
    /// `[factor][value]` → regional feature row.
    pub regional_table: Vec<Vec<Vec<f64>>>,
    /// Maps `z_q·K + z_{q+1}` to an answer index.
    pub answer_perm: Vec<usize>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect()
}

impl SyntheticWorld {
    pub fn new(config: &SyntheticSuiteConfig) -> Result<Self> {
        let c = config;
        if c.tasks.is_empty() {
            return Err(Error::Config("synthetic suite needs at least one task".into()));
        }
        let mut seen = c.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != c.tasks.len() {
            return Err(Error::Config("synthetic suite lists a task twice".into()));
        }
        if c.n_factors < 2 || c.factor_values < 2 || c.d_img == 0 || c.n_styles == 0 {
            return Err(Error::Config(
                "need n_factors ≥ 2, factor_values ≥ 2, d_img ≥ 1 and n_styles ≥ 1".into(),
            ));
        }
        if !(c.noise >= 0.0 && c.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and ≥ 0", c.noise)));
        }
        if c.regions != 0 && c.regions < c.n_factors {
            return Err(Error::Config(format!(
                "regions {} must be 0 or at least n_factors {}",
                c.regions, c.n_factors
            )));
        }
        if c.ranking_candidates == 0 {
            return Err(Error::Config("ranking_candidates must be positive".into()));
        }
        let vocab = SyntheticVocab {
            n_factors: c.n_factors,
            factor_values: c.factor_values,
            n_styles: c.n_styles,
            vocab_size: c.vocab_size,
        };
        let needed = vocab.first_noise() + MIN_NOISE_WORDS;
        if c.vocab_size < needed {
            return Err(Error::Config(format!(
                "vocab_size {} too small: the requested factors and styles need {needed}",
                c.vocab_size
            )));
        }
        let mut rng = seed::rng(c.seed, "synthetic/world");
        let scale = 1.0 / (c.n_factors as f64).sqrt();
        let global_table = (0..c.n_factors)
            .map(|_| (0..c.factor_values).map(|_| gaussian_vec(&mut rng, c.d_img, scale)).collect())
            .collect();
        let regional_table = (0..c.n_factors)
            .map(|_| (0..c.factor_values).map(|_| gaussian_vec(&mut rng, c.d_img, 1.0)).collect())
            .collect();
        let mut answer_perm: Vec<usize> = (0..c.factor_values * c.factor_values).collect();
        answer_perm.shuffle(&mut rng);
        Ok(SyntheticWorld {
            config: c.clone(),
            vocab,
            global_table,
            regional_table,
            answer_perm,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.config.tasks.len()
    }

    /// Style id reserved for a style-less task (`1..=n_tasks`).
    pub fn task_style(&self, task: SyntheticTask) -> u32 {
        let pos = self.config.tasks.iter().position(|&t| t == task).unwrap_or(0);
        pos as u32 + 1
    }

    /// Style id of trait `t` (`n_tasks+1..`).
    pub fn trait_style(&self, t: usize) -> u32 {
        (self.n_tasks() + 1 + t) as u32
    }

    pub fn style_vocab(&self) -> usize {
        1 + self.n_tasks() + self.config.n_styles
    }

    pub fn n_answers(&self) -> usize {
        self.config.factor_values * self.config.factor_values
    }

    /// Answer strings in answer-index order.
    pub fn answers(&self) -> Vec<String> {
        let k = self.config.factor_values;
        let mut out = vec![String::new(); self.n_answers()];
        for (j, &idx) in self.answer_perm.iter().enumerate() {
            out[idx] = format!("v{}-v{}", j / k, j % k);
        }
        out
    }

    /// Noise-free image features for latents `z`.
    pub fn clean_image(&self, z: &[usize]) -> RawImageFeatures {
        let d = self.config.d_img;
        let mut global = vec![0.0; d];
        for (f, &k) in z.iter().enumerate() {
            for (g, v) in global.iter_mut().zip(&self.global_table[f][k]) {
                *g += v;
            }
        }
        let regional = (0..self.config.regions)
            .map(|r| {
                if r < z.len() {
                    self.regional_table[r][z[r]].clone()
                } else {
                    vec![0.0; d]
                }
            })
            .collect();
        RawImageFeatures { global, regional }
    }

    pub fn noisy_image<R: Rng + ?Sized>(&self, z: &[usize], rng: &mut R) -> RawImageFeatures {
        let mut img = self.clean_image(z);
        let n = self.config.noise;
        for x in img.global.iter_mut().chain(img.regional.iter_mut().flatten()) {
            let g: f64 = StandardNormal.sample(rng);
            *x += n * g;
        }
        img
    }

    pub fn caption_gold(&self, z: &[usize]) -> Vec<TokenId> {
        z.iter().map(|&k| self.vocab.value_word(k)).collect()
    }

    pub fn chat_gold(&self, style_trait: usize, z: &[usize]) -> Vec<TokenId> {
        let f = self.config.n_factors;
        let a = style_trait % f;
        let b = (style_trait + 1) % f;
        vec![
            self.vocab.mood_word(style_trait, z[a]),
            self.vocab.value_word(z[b]),
        ]
    }

    /// The pair of factors asked about by question `q`.
    pub fn qa_factors(&self, q: usize) -> (usize, usize) {
        (q, (q + 1) % self.config.n_factors)
    }

    pub fn qa_answer(&self, q: usize, z: &[usize]) -> usize {
        let (a, b) = self.qa_factors(q);
        self.answer_perm[z[a] * self.config.factor_values + z[b]]
    }

    pub fn qa_gold(&self, q: usize, z: &[usize]) -> Vec<TokenId> {
        let (a, b) = self.qa_factors(q);
        vec![self.vocab.value_word(z[a]), self.vocab.value_word(z[b])]
    }

    pub fn qa_context(&self, q: usize) -> Vec<TokenId> {
        vec![self.vocab.prompt(SyntheticTask::Qa), self.vocab.factor_name(q)]
    }

    fn sizes(&self, task: SyntheticTask) -> SplitSizes {
        self.config
            .task_sizes
            .get(task.name())
            .copied()
            .unwrap_or(self.config.sizes)
    }

    fn header(&self, task: SyntheticTask) -> DatasetHeader {
        let style_space = match task {
            SyntheticTask::Chat => (0..self.config.n_styles).map(|t| self.trait_style(t)).collect(),
            _ => vec![self.task_style(task)],
        };
        DatasetHeader {
            format_version: FORMAT_VERSION,
            name: task.name().to_string(),
            head: task.head(),
            d_img_global: self.config.d_img,
            d_img_regional: self.config.d_img,
            regions: self.config.regions,
            style_space,
            eval_candidate_count: match task {
                SyntheticTask::Qa => self.n_answers(),
                _ => self.config.ranking_candidates,
            },
            answers: if task.head().classifies() {
                self.answers()
            } else {
                Vec::new()
            },
        }
    }

    fn example<R: Rng + ?Sized>(&self, task: SyntheticTask, id: String, rng: &mut R) -> Example {
        let c = &self.config;
        let z: Vec<usize> = (0..c.n_factors).map(|_| rng.random_range(0..c.factor_values)).collect();
        let image = Some(self.noisy_image(&z, rng));
        let v = &self.vocab;
        match task {
            SyntheticTask::Caption => Example {
                id,
                context: vec![v.prompt(task)],
                image,
                style: self.task_style(task),
                gold: Some(self.caption_gold(&z)),
                answer: None,
            },
            SyntheticTask::Chat => {
                let t = rng.random_range(0..c.n_styles);
                let noise = v.noise_words();
                let mut context = vec![v.prompt(task)];
                for turn in 0..2 {
                    if turn > 0 {
                        context.push(tokens::SEP);
                    }
                    let len = rng.random_range(1..=3);
                    context.extend((0..len).map(|_| rng.random_range(noise.clone()) as TokenId));
                }
                Example {
                    id,
                    context,
                    image,
                    style: self.trait_style(t),
                    gold: Some(self.chat_gold(t, &z)),
                    answer: None,
                }
            }
            SyntheticTask::Qa => {
                let q = rng.random_range(0..c.n_factors);
                Example {
                    id,
                    context: self.qa_context(q),
                    image,
                    style: self.task_style(task),
                    gold: Some(self.qa_gold(q, &z)),
                    answer: Some(AnswerTarget::Index(self.qa_answer(q, &z))),
                }
            }
        }
    }

    pub fn generate_task(&self, task: SyntheticTask) -> Result<TaskDataset> {
        let sizes = self.sizes(task);
        let split = |label: &str, n: usize| {
            let mut rng = seed::rng(self.config.seed, &format!("synthetic/{}/{label}", task.name()));
            (0..n)
                .map(|i| self.example(task, format!("{}-{label}-{i:05}", task.name()), &mut rng))
                .collect::<Vec<_>>()
        };
        let ds = TaskDataset {
            header: self.header(task),
            train: split("train", sizes.train),
            valid: split("valid", sizes.valid),
            test: split("test", sizes.test),
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Generates every task listed in `cfg`, in order.
pub fn generate_synthetic_suite(cfg: &SyntheticSuiteConfig) -> Result<Vec<TaskDataset>> {
    let world = SyntheticWorld::new(cfg)?;
    cfg.tasks.iter().map(|&t| world.generate_task(t)).collect()
}
