use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved token ids shared by every vocabulary.
pub mod tokens {
    use super::TokenId;
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    /// Separates dialogue turns in a flattened history.
    pub const SEP: TokenId = 2;
    pub const FIRST_FREE: TokenId = 3;
}

/// Reserved style ids. Ids `1..=n_tasks` tag style-less tasks; trait styles follow.
pub mod styles {
    pub const NO_STYLE: u32 = 0;
}

/// Precomputed image features: one global vector and `R` regional vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawImageFeatures {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub global: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regional: Vec<Vec<f64>>,
}

impl RawImageFeatures {
    pub fn regions(&self) -> usize {
        self.regional.len()
    }

    pub fn all_finite(&self) -> bool {
        self.global.iter().chain(self.regional.iter().flatten()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerTarget {
    /// Single correct answer.
    Index(usize),
    /// Per-answer credit in `[0, 1]`, e.g. annotator agreement. Accuracy under
    /// soft targets approximates consensus scoring; it is not an exact replica.
    Soft(Vec<f64>),
}

impl AnswerTarget {
    /// Dense target vector over `n_answers` classes.
    pub fn dense(&self, n_answers: usize) -> Result<Vec<f64>> {
        match self {
            AnswerTarget::Index(i) if *i < n_answers => {
                let mut v = vec![0.0; n_answers];
                v[*i] = 1.0;
                Ok(v)
            }
            AnswerTarget::Index(i) => Err(Error::Index(format!(
                "answer index {i} out of range for {n_answers} answers"
            ))),
            AnswerTarget::Soft(v) if v.len() == n_answers => Ok(v.clone()),
            AnswerTarget::Soft(v) => Err(Error::Dimension(format!(
                "soft target has {} entries, answer vocabulary has {n_answers}",
                v.len()
            ))),
        }
    }

    /// Credit earned by predicting `answer`.
    pub fn credit(&self, answer: usize) -> f64 {
        match self {
            AnswerTarget::Index(i) => f64::from(u8::from(*i == answer)),
            AnswerTarget::Soft(v) => v.get(answer).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    /// Flattened context; dialogue turns are joined with [`tokens::SEP`].
    pub context: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<RawImageFeatures>,
    pub style: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Ranking,
    Classification,
    Both,
}

impl HeadKind {
    pub fn ranks(self) -> bool {
        matches!(self, HeadKind::Ranking | HeadKind::Both)
    }

    pub fn classifies(self) -> bool {
        matches!(self, HeadKind::Classification | HeadKind::Both)
    }

    /// Whether a dataset bound to `self` can be trained with `mode`.
    pub fn supports(self, mode: HeadKind) -> bool {
        (!mode.ranks() || self.ranks()) && (!mode.classifies() || self.classifies())
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Ranking => "ranking",
            HeadKind::Classification => "classification",
            HeadKind::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

pub const FORMAT_VERSION: u32 = 1;

/// First record of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub name: String,
    pub head: HeadKind,
    pub d_img_global: usize,
    pub d_img_regional: usize,
    pub regions: usize,
    pub style_space: Vec<u32>,
    pub eval_candidate_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub header: DatasetHeader,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    pub fn name(&self) -> &str {
        &self.header.name
    }

    pub fn head(&self) -> HeadKind {
        self.header.head
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn splits(&self) -> [(Split, &[Example]); 3] {
        [
            (Split::Train, &self.train),
            (Split::Valid, &self.valid),
            (Split::Test, &self.test),
        ]
    }

    /// Checks every dataset invariant, naming the first offending example.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "dataset `{}` has format version {}, expected {FORMAT_VERSION}",
                h.name, h.format_version
            )));
        }
        if h.eval_candidate_count == 0 {
            return Err(Error::Config(format!(
                "dataset `{}`: eval_candidate_count must be positive",
                h.name
            )));
        }
        if h.head.classifies() && h.answers.is_empty() {
            return Err(Error::Config(format!(
                "dataset `{}` uses a classification head but declares no answers",
                h.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut unique_answers = std::collections::HashSet::new();
        if !h.answers.iter().all(|a| unique_answers.insert(a)) {
            return Err(Error::Config(format!("dataset `{}` repeats an answer", h.name)));
        }
        for (_, examples) in self.splits() {
            for ex in examples {
                let fail = |msg: String| Error::Validation {
                    id: ex.id.clone(),
                    msg,
                };
                if !seen.insert(ex.id.as_str()) {
                    return Err(fail("id appears more than once across splits".into()));
                }
                if ex.context.is_empty() {
                    return Err(fail("empty context".into()));
                }
                if !h.style_space.contains(&ex.style) {
                    return Err(fail(format!("style {} not in the style space", ex.style)));
                }
                if h.head.ranks() {
                    match &ex.gold {
                        Some(g) if !g.is_empty() => {}
                        _ => return Err(fail("ranking example without gold text".into())),
                    }
                }
                if h.head.classifies() {
                    match &ex.answer {
                        Some(a) => {
                            let dense = a.dense(h.answers.len()).map_err(|e| fail(e.to_string()))?;
                            if dense.iter().any(|t| !(0.0..=1.0).contains(t)) {
                                return Err(fail("answer target outside [0, 1]".into()));
                            }
                        }
                        None => return Err(fail("classification example without answer".into())),
                    }
                }
                if let Some(img) = &ex.image {
                    if !img.all_finite() {
                        return Err(fail("non-finite image feature".into()));
                    }
                    if !img.global.is_empty() && img.global.len() != h.d_img_global {
                        return Err(fail(format!(
                            "global feature width {} differs from header {}",
                            img.global.len(),
                            h.d_img_global
                        )));
                    }
                    if img.regions() != h.regions {
                        return Err(fail(format!(
                            "{} regions, header declares {}",
                            img.regions(),
                            h.regions
                        )));
                    }
                    if img.regional.iter().any(|r| r.len() != h.d_img_regional) {
                        return Err(fail(format!(
                            "regional feature width differs from header {}",
                            h.d_img_regional
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
