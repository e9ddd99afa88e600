//! Task datasets: types, on-disk format, evaluation candidate pools, the
//! synthetic suite and training-set downsampling.

pub mod candidates;
pub mod format;
pub mod synthetic;
mod types;

pub use candidates::{build_eval_candidates, CandidatePool, GoldIndex};
pub use format::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic_suite, SplitSizes, SyntheticSuiteConfig, SyntheticTask, SyntheticWorld};
pub use types::*;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Requested training-set size for [`downsample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    Fraction(f64),
    Absolute(usize),
}

/// Seeded uniform subsample of the train split; valid and test are untouched.
/// The kept examples stay in their original order.
pub fn downsample(ds: &TaskDataset, size: SampleSize, seed: u64) -> Result<TaskDataset> {
    let n = ds.train.len();
    let target = match size {
        SampleSize::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Domain(format!("fraction {f} outside (0, 1]")));
            }
            ((f * n as f64).round() as usize).max(1)
        }
        SampleSize::Absolute(k) => k,
    };
    if target == 0 {
        return Err(Error::Domain("downsample target must be at least 1".into()));
    }
    if target > n {
        return Err(Error::Domain(format!(
            "downsample target {target} exceeds train size {n}"
        )));
    }
    let mut out = ds.clone();
    if target == n {
        return Ok(out);
    }
    let mut rng = seed::rng(seed, &format!("downsample/{}", ds.name()));
    let mut keep = index::sample(&mut rng, n, target).into_vec();
    keep.sort_unstable();
    out.train = keep.into_iter().map(|i| ds.train[i].clone()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> Vec<TaskDataset> {
        generate_synthetic_suite(&SyntheticSuiteConfig {
            sizes: SplitSizes {
                train: 50,
                valid: 20,
                test: 20,
            },
            ..SyntheticSuiteConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn downsample_contract() {
        let ds = &suite()[0];
        let same = downsample(ds, SampleSize::Fraction(1.0), 3).unwrap();
        assert_eq!(same.train, ds.train);
        let half = downsample(ds, SampleSize::Fraction(0.5), 3).unwrap();
        assert_eq!(half.train.len(), 25);
        assert_eq!(half.valid, ds.valid);
        assert_eq!(half.test, ds.test);
        assert!(half.train.iter().all(|e| ds.train.contains(e)));
        assert_eq!(downsample(ds, SampleSize::Fraction(0.5), 3).unwrap().train, half.train);
        assert!(matches!(downsample(ds, SampleSize::Absolute(0), 3), Err(Error::Domain(_))));
        assert!(matches!(downsample(ds, SampleSize::Absolute(51), 3), Err(Error::Domain(_))));
        assert_eq!(downsample(ds, SampleSize::Absolute(7), 3).unwrap().train.len(), 7);
    }

    #[test]
    fn table_ratio_at_full_scale() {
        // 29000 of 82783 training captions
        let f: f64 = 29000.0 / 82783.0;
        assert!((f - 0.3503).abs() < 1e-4);
    }
}
