use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NoduleSample;
use crate::error::{Error, Result};

/// Share of each training portion held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Index lists into a sample slice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold assignment: `fold_of[i]` is the test fold of sample `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: Vec<usize>,
}

/// Stratum of a sample: its rounded mean malignancy score.
pub fn stratum(sample: &NoduleSample) -> i64 {
    sample.labels.mal_mean.round() as i64
}

fn strata_of(samples: &[NoduleSample], indices: &[usize]) -> BTreeMap<i64, Vec<usize>> {
    let mut strata: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        strata.entry(stratum(&samples[i])).or_default().push(i);
    }
    strata
}

/// Assigns every sample a test fold so that each stratum is spread over the
/// folds round-robin, continuing the rotation across strata.
pub fn stratified_folds(samples: &[NoduleSample], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut fold_of = vec![0; samples.len()];
    let mut next = 0;
    for (label, mut members) in strata_of(samples, &all) {
        if members.len() < k {
            warn!(
                "stratum {label} has {} samples for {k} folds; stratification is best-effort",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, fold_of })
}

impl FoldAssignment {
    /// Test set is `fold`; the rest is split into train and a stratified
    /// validation holdout.
    pub fn split(&self, samples: &[NoduleSample], fold: usize) -> Result<Split> {
        if fold >= self.k {
            return Err(Error::InvalidInput(format!("fold {fold} out of range for k={}", self.k)));
        }
        if samples.len() != self.fold_of.len() {
            return Err(Error::InvalidInput(format!(
                "fold assignment covers {} samples, dataset has {}",
                self.fold_of.len(),
                samples.len()
            )));
        }
        let (test, rest): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| self.fold_of[i] == fold);
        let seed = self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1));
        let (train, val) = stratified_holdout(samples, &rest, VALIDATION_FRACTION, seed);
        Ok(Split { train, val, test })
    }
}

/// Splits `indices` into `(keep, holdout)` with `round(fraction * n)`
/// held out, spread evenly over the strata. Both halves are sorted.
pub fn stratified_holdout(
    samples: &[NoduleSample],
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let n = indices.len();
    let n_hold = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered = Vec::with_capacity(n);
    for (_, mut members) in strata_of(samples, indices) {
        members.shuffle(&mut rng);
        ordered.extend(members);
    }
    // systematic sampling over the stratum-grouped order picks exactly n_hold
    let (mut keep, mut hold) = (Vec::new(), Vec::new());
    for (pos, &i) in ordered.iter().enumerate() {
        if (pos + 1) * n_hold / n.max(1) > pos * n_hold / n.max(1) {
            hold.push(i);
        } else {
            keep.push(i);
        }
    }
    keep.sort_unstable();
    hold.sort_unstable();
    (keep, hold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleLabels;
    use crate::numerics::Tensor;

    fn samples_with(means: &[f64]) -> Vec<NoduleSample> {
        means
            .iter()
            .enumerate()
            .map(|(i, &m)| NoduleSample {
                labels: SampleLabels {
                    id: format!("n{i}"),
                    mal_mean: m,
                    mal_std: 0.0,
                    n_raters: 3,
                    attr_means: vec![1.0; 8],
                    b: 0,
                },
                image: Tensor::zeros(&[1, 32, 32]),
                mask: Tensor::zeros(&[1, 32, 32]),
            })
            .collect()
    }

    #[test]
    fn balanced_two_classes() {
        let means: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { 5.0 }).collect();
        let s = samples_with(&means);
        let f = stratified_folds(&s, 5, 7).unwrap();
        for fold in 0..5 {
            let low = (0..100).filter(|&i| f.fold_of[i] == fold && means[i] == 1.0).count();
            let high = (0..100).filter(|&i| f.fold_of[i] == fold && means[i] == 5.0).count();
            assert_eq!((low, high), (10, 10));
        }
    }

    #[test]
    fn deterministic_and_partitioning() {
        let means: Vec<f64> = (0..37).map(|i| 1.0 + (i % 5) as f64 * 0.9).collect();
        let s = samples_with(&means);
        let a = stratified_folds(&s, 5, 1).unwrap();
        assert_eq!(a, stratified_folds(&s, 5, 1).unwrap());
        let mut seen = vec![0; s.len()];
        for fold in 0..5 {
            let sp = a.split(&s, fold).unwrap();
            for &i in &sp.test {
                seen[i] += 1;
            }
            let mut all: Vec<_> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
            let n_train = sp.train.len() + sp.val.len();
            assert_eq!(sp.val.len(), (0.1 * n_train as f64).round() as usize);
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(stratified_folds(&s, 1, 0).is_err());
    }

    #[test]
    fn fold_proportions_within_one() {
        let means: Vec<f64> = (0..53).map(|i| [1.0, 2.0, 4.0, 5.0][i % 4] + if i % 7 == 0 { 0.3 } else { 0.0 }).collect();
        let s = samples_with(&means);
        let f = stratified_folds(&s, 5, 99).unwrap();
        let strata = strata_of(&s, &(0..s.len()).collect::<Vec<_>>());
        for members in strata.values() {
            let expected = members.len() as f64 / 5.0;
            for fold in 0..5 {
                let c = members.iter().filter(|&&i| f.fold_of[i] == fold).count() as f64;
                assert!((c - expected).abs() <= 1.0, "{c} vs {expected}");
            }
        }
    }
}
