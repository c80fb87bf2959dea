use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, Result};

/// One cross-validation fold, expressed over subject ids so that every
/// night of a subject lands on the same side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

impl Fold {
    pub fn train_indices(&self, dataset: &Dataset) -> Vec<usize> {
        dataset.indices_of_subjects(&self.train_subjects)
    }

    pub fn test_indices(&self, dataset: &Dataset) -> Vec<usize> {
        dataset.indices_of_subjects(&self.test_subjects)
    }
}

/// Splits the subject roster into `k` contiguous chunks whose sizes differ
/// by at most one; fold `i` tests on chunk `i`. With `k` equal to the
/// subject count this is leave-one-subject-out.
pub fn subject_kfold_split(dataset: &Dataset, k: usize) -> Result<Vec<Fold>> {
    let subjects = dataset.subjects();
    if k == 0 || k > subjects.len() {
        return Err(Error::config(format!(
            "cannot make {k} folds from {} subjects",
            subjects.len()
        )));
    }
    let (base, extra) = (subjects.len() / k, subjects.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let end = start + base + usize::from(i < extra);
        let test = subjects[start..end].to_vec();
        let train = subjects[..start]
            .iter()
            .chain(&subjects[end..])
            .cloned()
            .collect();
        folds.push(Fold {
            train_subjects: train,
            test_subjects: test,
        });
        start = end;
    }
    Ok(folds)
}
