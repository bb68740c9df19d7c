use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Known/unknown partition of a dataset's classes. Known class
/// `known_classes[i]` trains as label `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub trial_seed: u64,
}

/// Shuffle `0..class_count` with SplitMix64(`trial_seed`) Fisher–Yates; the
/// first `n_known` become known. Both sides are then sorted ascending.
pub fn make_open_split(class_count: usize, n_known: usize, trial_seed: u64) -> Result<OpenSetSplit> {
    if n_known < 1 || n_known >= class_count {
        return Err(Error::invalid(format!(
            "n_known must lie in [1, {}), got {n_known}",
            class_count
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    SplitMix64::new(trial_seed).shuffle(&mut order);
    let mut known = order[..n_known].to_vec();
    let mut unknown = order[n_known..].to_vec();
    known.sort_unstable();
    unknown.sort_unstable();
    Ok(OpenSetSplit {
        known_classes: known,
        unknown_classes: unknown,
        trial_seed,
    })
}

impl OpenSetSplit {
    /// Explicit known classes; everything else in `0..class_count` is unknown.
    pub fn from_known(class_count: usize, known: &[usize]) -> Result<Self> {
        let mut known = known.to_vec();
        known.sort_unstable();
        known.dedup();
        if known.is_empty() || known.len() >= class_count {
            return Err(Error::invalid(format!(
                "need between 1 and {} known classes, got {}",
                class_count - 1,
                known.len()
            )));
        }
        if let Some(bad) = known.iter().find(|&&c| c >= class_count) {
            return Err(Error::invalid(format!("known class {bad} outside {class_count} classes")));
        }
        Ok(OpenSetSplit {
            unknown_classes: (0..class_count).filter(|c| !known.contains(c)).collect(),
            known_classes: known,
            trial_seed: 0,
        })
    }

    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn known_index(&self, label: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == label)
    }

    /// Known samples with remapped labels, and unknown samples with their
    /// original labels.
    pub fn partition(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        let total = self.known_classes.len() + self.unknown_classes.len();
        if total != data.class_count {
            return Err(Error::invalid(format!(
                "split covers {total} classes, dataset has {}",
                data.class_count
            )));
        }
        let (mut known_idx, mut unknown_idx, mut remapped) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &label) in data.labels.iter().enumerate() {
            match self.known_index(label) {
                Some(k) => {
                    known_idx.push(i);
                    remapped.push(k);
                }
                None => unknown_idx.push(i),
            }
        }
        let mut known = data.subset(&known_idx);
        known.labels = remapped;
        known.class_count = self.num_known();
        Ok((known, data.subset(&unknown_idx)))
    }
}
