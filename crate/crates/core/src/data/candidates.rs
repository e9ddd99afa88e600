//! Fixed-size evaluation candidate pools.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;

use super::types::{Example, TokenId};
use crate::error::{Error, Result};
use crate::seed;

/// One example's candidates with the gold's position.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub candidates: Vec<Vec<TokenId>>,
    pub gold_index: usize,
}

/// Distinct gold texts of a split, in first-occurrence order.
#[derive(Debug, Clone)]
pub struct GoldIndex {
    texts: Vec<Vec<TokenId>>,
}

impl GoldIndex {
    pub fn new(examples: &[Example]) -> Self {
        let mut seen = HashSet::new();
        let texts = examples
            .iter()
            .filter_map(|e| e.gold.as_ref())
            .filter(|g| seen.insert(g.as_slice()))
            .cloned()
            .collect();
        GoldIndex { texts }
    }

    pub fn distinct(&self) -> usize {
        self.texts.len()
    }

    /// Gold plus `count − 1` distinct distractors drawn without replacement
    /// from the other gold texts, with the gold at a seeded position. The
    /// stream is keyed by `(seed, example id)`.
    pub fn pool(&self, example: &Example, count: usize, seed: u64) -> Result<CandidatePool> {
        let gold = example.gold.as_ref().ok_or_else(|| Error::Validation {
            id: example.id.clone(),
            msg: "no gold text to rank".into(),
        })?;
        if count == 0 {
            return Err(Error::Config("candidate count must be positive".into()));
        }
        let others: Vec<&Vec<TokenId>> = self.texts.iter().filter(|t| *t != gold).collect();
        if others.len() + 1 < count {
            return Err(Error::Config(format!(
                "need {count} distinct candidates but only {} are available",
                others.len() + 1
            )));
        }
        let mut rng = seed::rng(seed, &format!("candidates/{}", example.id));
        let picks = index::sample(&mut rng, others.len(), count - 1);
        let gold_index = rng.random_range(0..count);
        let mut candidates: Vec<Vec<TokenId>> = picks.into_iter().map(|i| others[i].clone()).collect();
        candidates.insert(gold_index, gold.clone());
        Ok(CandidatePool {
            candidates,
            gold_index,
        })
    }
}

/// Candidate pool for `example` drawn from the golds of `split_examples`.
pub fn build_eval_candidates(
    example: &Example,
    split_examples: &[Example],
    count: usize,
    seed: u64,
) -> Result<CandidatePool> {
    GoldIndex::new(split_examples).pool(example, count, seed)
}
