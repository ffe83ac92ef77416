//! Random k-fold assignment over the labeled cases.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::DatasetManifest;

/// Uniformly random partition into k folds with sizes differing by at most
/// one; deterministic for a given seed. Unlabeled cases stay unassigned.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {k}")));
    }
    let mut ids: Vec<String> = manifest
        .labeled_cases()
        .map(|c| c.case_id.clone())
        .collect();
    if ids.len() < k {
        return Err(Error::Validation(format!(
            "{} labeled cases cannot fill {k} folds",
            ids.len()
        )));
    }
    ids.sort(); // seed-independent base order
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut out = manifest.clone();
    out.folds.clear();
    for (i, id) in ids.into_iter().enumerate() {
        out.folds.insert(id, i % k);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::CaseRecord;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| CaseRecord {
                    case_id: format!("case{i:03}"),
                    dwi: PathBuf::from("d"),
                    adc: PathBuf::from("a"),
                    flair: None,
                    label: Some(PathBuf::from("l")),
                })
                .collect(),
        )
    }

    #[test]
    fn two_hundred_fifty_cases_split_into_five_even_folds() {
        let m = make_folds(&manifest(250), 5, 0).unwrap();
        assert_eq!(m.fold_sizes(), vec![50; 5]);
    }

    #[test]
    fn seven_cases_into_five_folds_obeys_pigeonhole() {
        let m = make_folds(&manifest(7), 5, 3).unwrap();
        let mut sizes = m.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn same_seed_same_folds_different_seed_different_folds() {
        let base = manifest(40);
        let a = make_folds(&base, 5, 11).unwrap();
        let b = make_folds(&base, 5, 11).unwrap();
        assert_eq!(a.folds, b.folds);
        let mut any_diff = false;
        for seed in 12..20 {
            let c = make_folds(&base, 5, seed).unwrap();
            if c.folds != a.folds {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds kept producing identical folds");
    }

    #[test]
    fn too_few_cases_is_an_error() {
        assert!(make_folds(&manifest(3), 5, 0).is_err());
    }

    #[test]
    fn folds_partition_the_labeled_set_across_many_seeds() {
        for seed in 0..100 {
            let n = 5 + (seed as usize % 60);
            let m = make_folds(&manifest(n), 5, seed).unwrap();
            let all: HashSet<_> = m.folds.keys().cloned().collect();
            assert_eq!(all.len(), n);
            for fold in 0..5 {
                let (train, val) = m.train_val_split(fold);
                assert!(!train.is_empty() && !val.is_empty());
                let t: HashSet<_> = train.iter().map(|c| &c.case_id).collect();
                let v: HashSet<_> = val.iter().map(|c| &c.case_id).collect();
                assert!(t.is_disjoint(&v), "seed {seed} fold {fold}");
                assert_eq!(t.len() + v.len(), n);
            }
        }
    }
}
