use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Disjoint index sets into the dataset that was split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn apply(&self, ds: &Dataset) -> (Dataset, Dataset, Dataset) {
        (
            ds.subset(&self.train),
            ds.subset(&self.val),
            ds.subset(&self.test),
        )
    }
}

fn part_size(frac: f64, n: usize) -> usize {
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Stratified, seed-deterministic split. Each part holds
/// `floor(frac · N)` samples, dealt round-robin over classes so per-class
/// counts stay within one of each other.
pub fn split(
    ds: &Dataset,
    train_frac: f64,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<Split> {
    let fracs = [train_frac, val_frac, test_frac];
    if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Usage(format!(
            "split fractions must be >= 0, got {fracs:?}"
        )));
    }
    if fracs.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Usage(format!(
            "split fractions sum to more than 1: {fracs:?}"
        )));
    }
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.y.iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; ds.n_classes];
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(3);
    let mut start_class = 0usize;
    for &frac in &fracs {
        let want = part_size(frac, n);
        let mut part = Vec::with_capacity(want);
        let mut c = start_class;
        let mut idle = 0;
        while part.len() < want && idle < ds.n_classes {
            if cursor[c] < by_class[c].len() {
                part.push(by_class[c][cursor[c]]);
                cursor[c] += 1;
                idle = 0;
            } else {
                idle += 1;
            }
            c = (c + 1) % ds.n_classes;
        }
        start_class = c;
        part.sort_unstable();
        parts.push(part);
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Split { train, val, test })
}
