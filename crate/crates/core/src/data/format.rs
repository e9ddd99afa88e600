//! Line-delimited JSON dataset files: one header record, then one example per
//! line tagged with its split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{AnswerTarget, DatasetHeader, Example, RawImageFeatures, Split, TaskDataset};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: DatasetHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    split: Split,
    id: String,
    context: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<RawImageFeatures>,
    style: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<AnswerTarget>,
}

/// Canonical text form of a dataset.
pub fn to_string(ds: &TaskDataset) -> String {
    let mut out = serde_json::to_string(&HeaderLine {
        header: ds.header.clone(),
    })
    .expect("header serialises");
    out.push('\n');
    for (split, examples) in ds.splits() {
        for ex in examples {
            let line = ExampleLine {
                split,
                id: ex.id.clone(),
                context: ex.context.clone(),
                image: ex.image.clone(),
                style: ex.style,
                gold: ex.gold.clone(),
                answer: ex.answer.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("example serialises"));
            out.push('\n');
        }
    }
    out
}

/// Parses and validates a dataset. Parse errors carry 1-based line numbers.
pub fn from_str(text: &str) -> Result<TaskDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header record".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    let mut ds = TaskDataset {
        header: header.header,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in lines {
        let rec: ExampleLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        let ex = Example {
            id: rec.id,
            context: rec.context,
            image: rec.image,
            style: rec.style,
            gold: rec.gold,
            answer: rec.answer,
        };
        match rec.split {
            Split::Train => ds.train.push(ex),
            Split::Valid => ds.valid.push(ex),
            Split::Test => ds.test.push(ex),
        }
    }
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

pub fn save_dataset(ds: &TaskDataset, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, to_string(ds).as_bytes())
}
