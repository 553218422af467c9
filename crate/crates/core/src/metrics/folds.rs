use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Per-sample fold index in `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignments {
            s[f] += 1;
        }
        s
    }
}

/// Shuffles each class with a seeded RNG and deals it round-robin over the
/// folds. Each class starts where the previous one stopped, so total fold
/// sizes are balanced within one as well.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit, MetricsError> {
    if k < 2 {
        return Err(MetricsError::Stratification(format!(
            "k must be at least 2, got {k}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if let Some((c, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        return Err(MetricsError::Stratification(format!(
            "class {c} has {} samples, fewer than k = {k}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldSplit { k, assignments })
}

pub type MetricRecord = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAverage {
    pub folds: usize,
    pub mean: MetricRecord,
    /// Population standard deviation across folds.
    pub std: MetricRecord,
}

/// Arithmetic mean and standard deviation of each metric over folds.
pub fn average_folds(per_fold: &[MetricRecord]) -> Result<FoldAverage, MetricsError> {
    let first = per_fold.first().ok_or(MetricsError::NoFolds)?;
    for (i, r) in per_fold.iter().enumerate() {
        if !r.keys().eq(first.keys()) {
            return Err(MetricsError::InconsistentKeys { fold: i });
        }
    }
    let n = per_fold.len() as f64;
    let mut mean = MetricRecord::new();
    let mut std = MetricRecord::new();
    for key in first.keys() {
        let m = per_fold.iter().map(|r| r[key]).sum::<f64>() / n;
        let var = per_fold.iter().map(|r| (r[key] - m).powi(2)).sum::<f64>() / n;
        mean.insert(key.clone(), m);
        std.insert(key.clone(), var.sqrt());
    }
    Ok(FoldAverage {
        folds: per_fold.len(),
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pairs: &[(&str, f64)]) -> MetricRecord {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn single_class_ten_samples() {
        let s = stratified_kfold(&[0; 10], 5, 1).unwrap();
        assert_eq!(s.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let labels: Vec<usize> = (0..103).map(|i| i % 4).collect();
        let a = stratified_kfold(&labels, 5, 42).unwrap();
        assert_eq!(a, stratified_kfold(&labels, 5, 42).unwrap());
        assert_ne!(a, stratified_kfold(&labels, 5, 43).unwrap());
        let mut all: Vec<usize> = (0..5).flat_map(|f| a.test_indices(f)).collect();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(a.train_indices(0).len() + a.test_indices(0).len(), 103);
    }

    #[test]
    fn small_class_is_rejected() {
        assert!(matches!(
            stratified_kfold(&[0, 0, 0, 0, 0, 1, 1], 5, 0),
            Err(MetricsError::Stratification(_))
        ));
    }

    #[test]
    fn averaging() {
        let a = average_folds(&[rec(&[("acc", 0.9)]), rec(&[("acc", 1.0)])]).unwrap();
        assert!((a.mean["acc"] - 0.95).abs() < 1e-15);
        assert!((a.std["acc"] - 0.05).abs() < 1e-15);
        let same = average_folds(&vec![rec(&[("f1", 0.75)]); 3]).unwrap();
        assert_eq!((same.mean["f1"], same.std["f1"]), (0.75, 0.0));
        assert!(matches!(
            average_folds(&[rec(&[("acc", 1.0)]), rec(&[("f1", 1.0)])]),
            Err(MetricsError::InconsistentKeys { fold: 1 })
        ));
        assert!(matches!(average_folds(&[]), Err(MetricsError::NoFolds)));
    }
}
