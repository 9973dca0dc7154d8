//! k-fold assignment and epoch batching.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fold id of every sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Validation indices of fold `f`, ascending.
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == f)
            .collect()
    }

    /// Training indices for run `f` (every fold except `f`), ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != f)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

fn check_folds(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("fold count must be positive".into()));
    }
    if n < k {
        return Err(Error::Validation(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    Ok(())
}

fn deal(order: &[usize], n: usize, k: usize) -> FoldSplit {
    let mut assignment = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        assignment[i] = j % k;
    }
    FoldSplit { k, assignment }
}

/// Seeded shuffle of `0..n` dealt round-robin into `k` folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    check_folds(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    Ok(deal(&order, n, k))
}

/// Like [`kfold_split`] but shuffles within each class and deals the classes
/// in label order, so every fold receives a near-equal share of each class.
pub fn kfold_split_stratified(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    check_folds(labels.len(), k)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = Rng::new(seed);
    let mut order = Vec::with_capacity(labels.len());
    for members in by_class.values_mut() {
        rng.shuffle(members);
        order.extend_from_slice(members);
    }
    Ok(deal(&order, labels.len(), k))
}

/// Seeded permutation of `samples` cut into chunks of `batch_size`; the last
/// chunk may be short.
pub fn make_batches<S: Clone>(samples: &[S], batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<S>>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| samples[i].clone()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn check_partition(split: &FoldSplit, n: usize) {
        let mut seen = vec![0; n];
        for f in 0..split.k() {
            for i in split.fold(f) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let sizes = split.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn even_and_remainder_splits() {
        let s = kfold_split(10, 5, 3).unwrap();
        assert_eq!(s.sizes(), vec![2; 5]);
        check_partition(&s, 10);
        let mut sizes = kfold_split(11, 5, 3).unwrap().sizes();
        sizes.sort();
        assert_eq!(sizes, [2, 2, 2, 2, 3]);
    }

    #[test]
    fn seeding() {
        assert_eq!(kfold_split(100, 5, 1).unwrap(), kfold_split(100, 5, 1).unwrap());
        assert_ne!(kfold_split(100, 5, 1).unwrap(), kfold_split(100, 5, 2).unwrap());
    }

    #[test]
    fn train_and_validation_are_complementary() {
        let s = kfold_split(23, 5, 0).unwrap();
        for f in 0..5 {
            let mut all = s.fold(f);
            all.extend(s.train_indices(f));
            all.sort();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(kfold_split(4, 5, 0).is_err());
        assert!(kfold_split(4, 0, 0).is_err());
    }

    #[test]
    fn stratified_balances_classes() {
        let labels: Vec<usize> = (0..50).map(|i| usize::from(i >= 40)).collect();
        let s = kfold_split_stratified(&labels, 5, 7).unwrap();
        check_partition(&s, 50);
        for f in 0..5 {
            let minority = s.fold(f).iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(minority, 2);
        }
    }

    #[test]
    fn batch_examples() {
        let mut rng = Rng::new(0);
        let sizes = |b: Vec<Vec<usize>>| b.iter().map(Vec::len).collect::<Vec<_>>();
        let items: Vec<usize> = (0..16).collect();
        assert_eq!(sizes(make_batches(&items, 8, &mut rng).unwrap()), [8, 8]);
        let items: Vec<usize> = (0..17).collect();
        assert_eq!(sizes(make_batches(&items, 8, &mut rng).unwrap()), [8, 8, 1]);
        assert!(make_batches(&items, 0, &mut rng).is_err());
        assert!(make_batches::<usize>(&[], 8, &mut rng).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 5usize..=200, seed in any::<u64>()) {
            let s = kfold_split(n, 5, seed).unwrap();
            check_partition(&s, n);
        }

        #[test]
        fn batches_cover_each_sample_once(n in 0usize..100, b in 1usize..20, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let batches = make_batches(&items, b, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(b));
            let mut flat: Vec<usize> = batches.into_iter().flatten().collect();
            flat.sort();
            prop_assert_eq!(flat, items);
        }
    }
}
