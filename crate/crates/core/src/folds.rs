//! Censorship-stratified k-fold splits.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Survival;
use crate::error::{Error, Result};

pub const FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffles events and censorings separately, then deals each stratum
/// round-robin so every fold gets a near-equal share of both.
pub fn make_folds(survivals: &[Survival], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 || survivals.len() < folds {
        return Err(Error::Config(alloc::format!(
            "{} patients cannot be split into {folds} folds",
            survivals.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<usize> = (0..survivals.len()).filter(|&i| !survivals[i].censored).collect();
    let mut censored: Vec<usize> = (0..survivals.len()).filter(|&i| survivals[i].censored).collect();
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    let mut assignment = alloc::vec![0usize; survivals.len()];
    for (slot, &i) in events.iter().chain(&censored).enumerate() {
        assignment[i] = slot % folds;
    }
    Ok((0..folds)
        .map(|f| {
            let (validation, train) = (0..survivals.len()).partition(|&i| assignment[i] == f);
            Fold { train, validation }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn cohort(n: usize) -> Vec<Survival> {
        (0..n)
            .map(|i| Survival {
                time_months: 1.0 + i as f64,
                censored: i % 10 < 3,
            })
            .collect()
    }

    #[test]
    fn hundred_patients_give_folds_of_twenty() {
        let folds = make_folds(&cohort(100), FOLDS, 1).unwrap();
        assert!(folds.iter().all(|f| f.validation.len() == 20 && f.train.len() == 80));
        assert_eq!(folds, make_folds(&cohort(100), FOLDS, 1).unwrap());
        assert_ne!(folds, make_folds(&cohort(100), FOLDS, 2).unwrap());
    }

    #[test]
    fn too_few_patients() {
        assert!(make_folds(&cohort(4), FOLDS, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(n in 100usize..300, seed in 0u64..1000) {
            let surv = cohort(n);
            let folds = make_folds(&surv, FOLDS, seed).unwrap();
            let mut seen = vec![0u8; n];
            let overall = surv.iter().filter(|s| s.censored).count() as f64 / n as f64;
            for f in &folds {
                for &i in &f.validation {
                    seen[i] += 1;
                }
                prop_assert_eq!(f.train.len() + f.validation.len(), n);
                prop_assert!(f.train.iter().all(|i| !f.validation.contains(i)));
                let rate = f.validation.iter().filter(|&&i| surv[i].censored).count() as f64
                    / f.validation.len() as f64;
                prop_assert!((rate - overall).abs() <= 0.10);
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
