//! Seed-deterministic train/validation/test row partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::DataError;

/// Minimum dataset size worth partitioning three ways.
pub const MIN_ROWS: usize = 10;

/// Disjoint, exhaustive row index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn materialize(&self, ds: &Dataset) -> (Dataset, Dataset, Dataset) {
        (
            ds.select_rows(&self.train),
            ds.select_rows(&self.val),
            ds.select_rows(&self.test),
        )
    }
}

/// Splits `0..n` into train/val/test by the given ratios, shuffled by the
/// seed. Train and validation sizes round down; the test set takes the
/// remainder, so the three sets always partition the full index range.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices, DataError> {
    if n < MIN_ROWS {
        return Err(DataError::TooFewRows { n, min: MIN_ROWS });
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSplit(ratios));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (ratios[0] * n as f64).floor() as usize;
    let n_val = (ratios[1] * n as f64).floor() as usize;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_rows_split_seventy_ten_twenty() {
        let s = split(100, [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn same_seed_reproduces_the_same_sets() {
        let a = split(57, [0.7, 0.1, 0.2], 9).unwrap();
        let b = split(57, [0.7, 0.1, 0.2], 9).unwrap();
        assert_eq!(a, b);
        let c = split(57, [0.7, 0.1, 0.2], 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sets_partition_the_index_range() {
        let s = split(53, [0.7, 0.1, 0.2], 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..53).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn tiny_and_malformed_requests_are_rejected() {
        assert!(matches!(
            split(9, [0.7, 0.1, 0.2], 0),
            Err(DataError::TooFewRows { n: 9, min: 10 })
        ));
        assert!(matches!(split(100, [0.7, 0.1, 0.1], 0), Err(DataError::BadSplit(_))));
        assert!(matches!(split(100, [0.0, 0.5, 0.5], 0), Err(DataError::BadSplit(_))));
        assert!(matches!(split(100, [-0.2, 0.6, 0.6], 0), Err(DataError::BadSplit(_))));
    }
}
