//! Seeded k-fold cross-validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FetrError, Result};
use crate::types::MultitaskDataset;

/// One fold: the held-out rows and the rest, per task.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: MultitaskDataset,
    pub test: MultitaskDataset,
    pub train_rows: Vec<Vec<usize>>,
    pub test_rows: Vec<Vec<usize>>,
}

/// Row indices of each task shuffled and cut into `k` near-equal parts
/// (the first `n mod k` parts get one extra row). Shared-instance data uses
/// a single permutation for all tasks so every fold stays shared.
pub fn kfold_indices(task_sizes: &[usize], shared: bool, k: usize, seed: u64) -> Result<Vec<Vec<Vec<usize>>>> {
    if k < 2 {
        return Err(FetrError::Split(format!("need at least 2 folds, got {k}")));
    }
    if let Some((i, &n)) = task_sizes.iter().enumerate().find(|(_, &n)| n < k) {
        return Err(FetrError::Split(format!("task {i} has {n} rows, fewer than {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = |n: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let perms: Vec<Vec<usize>> = if shared {
        let p = shuffled(task_sizes[0]);
        vec![p; task_sizes.len()]
    } else {
        task_sizes.iter().map(|&n| shuffled(n)).collect()
    };
    // parts[task][fold]
    Ok(perms
        .into_iter()
        .map(|p| {
            let n = p.len();
            let mut start = 0;
            (0..k)
                .map(|j| {
                    let len = n / k + usize::from(j < n % k);
                    let mut part = p[start..start + len].to_vec();
                    part.sort_unstable();
                    start += len;
                    part
                })
                .collect()
        })
        .collect())
}

/// `k` folds; fold `j` tests on part `j` of every task and trains on the rest.
pub fn kfold_split(data: &MultitaskDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let parts = kfold_indices(&data.task_sizes(), data.is_shared(), k, seed)?;
    (0..k)
        .map(|j| {
            let test_rows: Vec<Vec<usize>> = parts.iter().map(|p| p[j].clone()).collect();
            let train_rows: Vec<Vec<usize>> = parts
                .iter()
                .map(|p| {
                    let mut rows: Vec<usize> = p
                        .iter()
                        .enumerate()
                        .filter(|&(f, _)| f != j)
                        .flat_map(|(_, r)| r.iter().copied())
                        .collect();
                    rows.sort_unstable();
                    rows
                })
                .collect();
            Ok(Fold {
                train: data.select_rows(&train_rows)?,
                test: data.select_rows(&test_rows)?,
                train_rows,
                test_rows,
            })
        })
        .collect()
}
