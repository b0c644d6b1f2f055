use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{invalid, DataError, Dataset};

/// Sample-index partition; every mode is split identically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// The dataset restricted to each part (`None` for an empty part).
    pub fn apply(&self, ds: &Dataset) -> Result<[Option<Dataset>; 3], DataError> {
        let part = |idx: &[usize]| -> Result<Option<Dataset>, DataError> {
            if idx.is_empty() {
                Ok(None)
            } else {
                ds.select_samples(idx).map(Some)
            }
        };
        Ok([part(&self.train)?, part(&self.val)?, part(&self.test)?])
    }
}

/// Shuffles sample indices deterministically and cuts them by `ratios`
/// (train, val, test). Each part keeps its indices sorted.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let counts = [n_train, n_val, n - n_train - n_val];
    for (r, c) in ratios.iter().zip(counts) {
        if *r > 0.0 && c == 0 {
            return Err(invalid(format!("n = {n} is too small for split ratios {ratios:?}")));
        }
    }
    let mut parts = [
        idx[..n_train].to_vec(),
        idx[n_train..n_train + n_val].to_vec(),
        idx[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_train() {
        let s = split_dataset(7, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(s.train, (0..7).collect::<Vec<_>>());
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn partition_and_determinism() {
        let s = split_dataset(20, [0.6, 0.2, 0.2], 11).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(20, [0.6, 0.2, 0.2], 11).unwrap());
    }

    #[test]
    fn too_small() {
        assert!(split_dataset(2, [0.5, 0.25, 0.25], 0).is_err());
        assert!(split_dataset(5, [0.5, 0.6, 0.0], 0).is_err());
    }
}
