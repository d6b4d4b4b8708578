use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{Label, ManifestRecord};

pub const MIN_CELL: usize = 10;

/// Train/val/test shares, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio(pub [usize; 3]);

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio([6, 2, 2])
    }
}

impl SplitRatio {
    /// `(train, val, test)` sizes for a cell of `n`; val and test are
    /// rounded to nearest and train takes the rest.
    pub fn sizes(self, n: usize) -> (usize, usize, usize) {
        let total: usize = self.0.iter().sum();
        let share = |k: usize| (2 * n * k + total) / (2 * total);
        let (val, test) = (share(self.0[1]), share(self.0[2]));
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ManifestRecord>,
    pub val: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

/// Stratified split: every (domain, label) cell is shuffled under `seed`
/// and cut by `ratio`.
pub fn split_dataset(records: &[ManifestRecord], ratio: SplitRatio, seed: u64) -> Result<DatasetSplit> {
    let mut cells: BTreeMap<(&str, Label), Vec<&ManifestRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.domain.as_str(), r.label)).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for ((domain, label), mut cell) in cells {
        if cell.len() < MIN_CELL {
            return Err(Error::Data(format!(
                "cell ({domain}, {label}) has {} records, need at least {MIN_CELL}",
                cell.len()
            )));
        }
        cell.sort_by(|a, b| a.path.cmp(&b.path));
        cell.shuffle(&mut rng);
        let (train, val, _) = ratio.sizes(cell.len());
        split.train.extend(cell[..train].iter().map(|r| (*r).clone()));
        split.val.extend(cell[train..train + val].iter().map(|r| (*r).clone()));
        split.test.extend(cell[train + val..].iter().map(|r| (*r).clone()));
    }
    Ok(split)
}
