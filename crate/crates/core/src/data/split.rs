use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingDataset, Result, Split};
use crate::rng::SplitMix64;

const SPLIT_STREAM: u64 = 0x5_0117;

/// How rows are assigned to train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
#[derive(Default)]
pub enum SplitPlan {
    /// Keep the tags stored with the dataset.
    #[default]
    Default,
    /// Hold out one domain as the test set; 10% of every class in the
    /// remaining domains becomes validation.
    Lodo { domain: usize, seed: u64 },
    /// Per-class 70/10/20.
    Stratified { seed: u64 },
}


fn round_count(n: usize, frac: f64) -> usize {
    ((n as f64) * frac).round() as usize
}

fn by_class(ds: &EmbeddingDataset, rows: impl Iterator<Item = usize>) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); ds.num_classes()];
    for i in rows {
        groups[ds.class_labels()[i]].push(i);
    }
    groups
}

/// Returns a copy of `ds` whose split tags follow `plan`.
pub fn make_split(ds: &EmbeddingDataset, plan: SplitPlan) -> Result<EmbeddingDataset> {
    let mut tags: Vec<Option<Split>> = vec![None; ds.len()];
    match plan {
        SplitPlan::Default => {
            if ds.splits().iter().all(Option::is_none) {
                return Err(DataError::MissingSplits);
            }
            return Ok(ds.clone());
        }
        SplitPlan::Stratified { seed } => {
            let mut rng = SplitMix64::stream(seed, SPLIT_STREAM);
            for mut group in by_class(ds, 0..ds.len()) {
                rng.shuffle(&mut group);
                let n_train = round_count(group.len(), 0.7);
                let n_val = round_count(group.len(), 0.1).min(group.len() - n_train);
                for (pos, &i) in group.iter().enumerate() {
                    tags[i] = Some(if pos < n_train {
                        Split::Train
                    } else if pos < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    });
                }
            }
        }
        SplitPlan::Lodo { domain, seed } => {
            let domains = ds.domain_labels().ok_or(DataError::MissingDomains)?;
            let num_domains = ds.num_domains().unwrap_or(0);
            if domain >= num_domains {
                return Err(DataError::EmptyDomain(domain));
            }
            let mut counts = vec![0usize; num_domains];
            for &d in domains {
                counts[d] += 1;
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(DataError::EmptyDomain(empty));
            }
            let mut rng = SplitMix64::stream(seed, SPLIT_STREAM);
            for (i, &d) in domains.iter().enumerate() {
                if d == domain {
                    tags[i] = Some(Split::Test);
                }
            }
            let rest = (0..ds.len()).filter(|&i| domains[i] != domain);
            for mut group in by_class(ds, rest) {
                rng.shuffle(&mut group);
                let n_val = round_count(group.len(), 0.1);
                for (pos, &i) in group.iter().enumerate() {
                    tags[i] = Some(if pos < n_val { Split::Val } else { Split::Train });
                }
            }
        }
    }
    ds.clone().with_splits(tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize, domains: usize) -> EmbeddingDataset {
        EmbeddingDataset::new(
            1,
            (0..n).map(|i| i as f32).collect(),
            (0..n).map(|i| i % classes).collect(),
            Some((0..n).map(|i| (i / classes) % domains).collect()),
            vec![None; n],
        )
        .unwrap()
    }

    fn count(ds: &EmbeddingDataset, split: Split, class: usize) -> usize {
        ds.indices(split).iter().filter(|&&i| ds.class_labels()[i] == class).count()
    }

    #[test]
    fn stratified_hundred_balanced() {
        let ds = make_split(&balanced(100, 2, 1), SplitPlan::Stratified { seed: 3 }).unwrap();
        for c in 0..2 {
            assert_eq!(count(&ds, Split::Train, c), 35);
            assert_eq!(count(&ds, Split::Val, c), 5);
            assert_eq!(count(&ds, Split::Test, c), 10);
        }
        assert!(ds.splits().iter().all(Option::is_some));
    }

    #[test]
    fn stratified_is_deterministic_and_seed_dependent() {
        let base = balanced(90, 3, 1);
        let a = make_split(&base, SplitPlan::Stratified { seed: 11 }).unwrap();
        let b = make_split(&base, SplitPlan::Stratified { seed: 11 }).unwrap();
        let c = make_split(&base, SplitPlan::Stratified { seed: 12 }).unwrap();
        assert_eq!(a.splits(), b.splits());
        assert_ne!(a.splits(), c.splits());
    }

    #[test]
    fn lodo_isolates_held_out_domain() {
        let ds = make_split(&balanced(120, 2, 3), SplitPlan::Lodo { domain: 2, seed: 0 }).unwrap();
        let domains = ds.domain_labels().unwrap();
        for i in 0..ds.len() {
            match ds.splits()[i] {
                Some(Split::Test) => assert_eq!(domains[i], 2),
                Some(_) => assert_ne!(domains[i], 2),
                None => panic!("untagged row {i}"),
            }
        }
        // 80 rows outside domain 2, 40 per class → 4 val per class.
        assert_eq!(count(&ds, Split::Val, 0), 4);
        assert_eq!(count(&ds, Split::Val, 1), 4);
    }

    #[test]
    fn lodo_errors() {
        let no_domains = EmbeddingDataset::new(1, vec![0.0, 1.0], vec![0, 1], None, vec![None; 2]).unwrap();
        assert!(matches!(
            make_split(&no_domains, SplitPlan::Lodo { domain: 0, seed: 0 }),
            Err(DataError::MissingDomains)
        ));
        let gap = EmbeddingDataset::new(1, vec![0.0, 1.0], vec![0, 1], Some(vec![0, 2]), vec![None; 2]).unwrap();
        assert!(matches!(
            make_split(&gap, SplitPlan::Lodo { domain: 0, seed: 0 }),
            Err(DataError::EmptyDomain(1))
        ));
        assert!(matches!(
            make_split(&gap, SplitPlan::Lodo { domain: 5, seed: 0 }),
            Err(DataError::EmptyDomain(5))
        ));
    }

    #[test]
    fn default_requires_tags() {
        assert!(matches!(
            make_split(&balanced(4, 2, 1), SplitPlan::Default),
            Err(DataError::MissingSplits)
        ));
    }
}
