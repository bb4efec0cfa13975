use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index partition of one cross-validation fold. Both lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    pub fn select<'a, T>(&self, items: &'a [T]) -> (Vec<&'a T>, Vec<&'a T>) {
        (
            self.train.iter().map(|&i| &items[i]).collect(),
            self.test.iter().map(|&i| &items[i]).collect(),
        )
    }

    pub fn select_cloned<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>) {
        (
            self.train.iter().map(|&i| items[i].clone()).collect(),
            self.test.iter().map(|&i| items[i].clone()).collect(),
        )
    }
}

/// Shuffles `0..count` with `seed` and cuts it into `k` test folds whose sizes
/// differ by at most one.
pub fn split_folds(count: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > count {
        return Err(Error::config(format!("fold count {k} invalid for {count} instances")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (count / k, count % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}
