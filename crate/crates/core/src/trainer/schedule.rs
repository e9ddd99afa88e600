use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Equal-updates task order for one epoch.
///
/// Every task appears `steps_per_epoch / tasks.len()` times; the remainder of
/// the division is dropped, so an epoch may run slightly fewer steps than
/// requested. The order is shuffled by `seed`.
pub fn equal_task_schedule<T: Clone>(tasks: &[T], steps_per_epoch: usize, seed: u64) -> Result<Vec<T>> {
    if tasks.is_empty() {
        return Err(Error::Config("cannot schedule an empty task list".into()));
    }
    let per = steps_per_epoch / tasks.len();
    let mut order: Vec<T> = tasks
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.clone(), per))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order)
}

/// Steps actually run per epoch after the remainder drop.
pub fn effective_steps(n_tasks: usize, steps_per_epoch: usize) -> usize {
    steps_per_epoch / n_tasks * n_tasks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_every_step() {
        let s = equal_task_schedule(&["a"], 7, 1).unwrap();
        assert_eq!(s, vec!["a"; 7]);
    }

    #[test]
    fn remainder_dropped() {
        let s = equal_task_schedule(&["a", "b", "c"], 10, 1).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(effective_steps(3, 10), 9);
        assert!(equal_task_schedule::<&str>(&[], 10, 1).is_err());
    }
}
