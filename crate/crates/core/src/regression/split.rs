use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default train/val/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

/// What happens to the records left over after flooring every part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    /// The first part takes everything not allocated to the others.
    #[default]
    ToTrain,
    /// Every part is floored and the leftovers are left out.
    Drop,
}

/// Indices into the id list, per part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

fn floor_share(n: usize, fraction: f64) -> usize {
    // guards against 0.29 * 100 = 28.999...
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Shuffle `0..n` with the seed, then cut contiguous parts.
pub fn split_indices(
    n: usize,
    fractions: &[f64],
    seed: u64,
    policy: RemainderPolicy,
) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidConfig(format!("bad split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions sum to {total}, not 1")));
    }
    if n < fractions.len() {
        return Err(Error::TooFewRecords { needed: fractions.len(), got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));

    let mut sizes: Vec<usize> = fractions.iter().map(|&f| floor_share(n, f)).collect();
    if policy == RemainderPolicy::ToTrain {
        sizes[0] = n - sizes[1..].iter().sum::<usize>();
    }
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        parts.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}

/// Train/val/test split of `n_ids` records.
pub fn split_dataset(n_ids: usize, fractions: [f64; 3], seed: u64, policy: RemainderPolicy) -> Result<Split> {
    let mut parts = split_indices(n_ids, &fractions, seed, policy)?.into_iter();
    let (train, val, test) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_ids_give_remainder_to_train() {
        let s = split_dataset(10, DEFAULT_FRACTIONS, 0, RemainderPolicy::ToTrain).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
        let s = split_dataset(10, DEFAULT_FRACTIONS, 0, RemainderPolicy::Drop).unwrap();
        assert_eq!(s.sizes(), (7, 1, 1));
    }

    #[test]
    fn full_dataset_sizes() {
        let s = split_dataset(7466, DEFAULT_FRACTIONS, 3, RemainderPolicy::ToTrain).unwrap();
        assert_eq!(s.sizes(), (5228, 1119, 1119));
        let s = split_dataset(7466, DEFAULT_FRACTIONS, 3, RemainderPolicy::Drop).unwrap();
        assert_eq!(s.sizes(), (5226, 1119, 1119));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            split_dataset(2, DEFAULT_FRACTIONS, 0, RemainderPolicy::ToTrain),
            Err(Error::TooFewRecords { needed: 3, got: 2 })
        ));
        assert!(split_dataset(10, [0.5, 0.5, 0.5], 0, RemainderPolicy::ToTrain).is_err());
    }

    proptest! {
        #[test]
        fn disjoint_exhaustive_deterministic(n in 3usize..400, seed in any::<u64>()) {
            let a = split_dataset(n, DEFAULT_FRACTIONS, seed, RemainderPolicy::ToTrain).unwrap();
            let b = split_dataset(n, DEFAULT_FRACTIONS, seed, RemainderPolicy::ToTrain).unwrap();
            prop_assert_eq!(&a, &b);
            let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
