use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{UserId, UserRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
        }
    }
}

/// Disjoint train / validation / test user-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<UserId>,
    pub validation: Vec<UserId>,
    pub test: Vec<UserId>,
}

impl DatasetSplit {
    /// Hex SHA-256 over the three id lists; equal splits hash equally.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, ids) in [("train", &self.train), ("val", &self.validation), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for id in ids {
                h.update(id.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn select<'a>(&self, users: &'a [UserRecord], part: &[UserId]) -> Vec<&'a UserRecord> {
        let ids: BTreeSet<UserId> = part.iter().copied().collect();
        users.iter().filter(|u| ids.contains(&u.user_id)).collect()
    }

    pub fn train_users<'a>(&self, users: &'a [UserRecord]) -> Vec<&'a UserRecord> {
        self.select(users, &self.train)
    }

    pub fn validation_users<'a>(&self, users: &'a [UserRecord]) -> Vec<&'a UserRecord> {
        self.select(users, &self.validation)
    }

    pub fn test_users<'a>(&self, users: &'a [UserRecord]) -> Vec<&'a UserRecord> {
        self.select(users, &self.test)
    }
}

/// Stratified, seeded three-way split.
///
/// Part sizes are `round(n * train)`, `round(n * validation)` and the
/// remainder. Each class is shuffled separately and the classes are
/// interleaved by relative position before cutting, so every part keeps the
/// global label prevalence up to one user per class.
pub fn split_users(users: &[UserRecord], fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    if users.len() < 10 {
        return Err(Error::Data(format!(
            "need at least 10 users to split, got {}",
            users.len()
        )));
    }
    let SplitFractions { train, validation } = fractions;
    if !(train > 0.0 && validation >= 0.0 && train + validation < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid split fractions {train}/{validation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, UserId)> = Vec::with_capacity(users.len());
    for label in 0..=1u8 {
        let mut ids: Vec<UserId> = users
            .iter()
            .filter(|u| u.label == label)
            .map(|u| u.user_id)
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        keyed.extend(
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| ((i as f64 + 0.5) / n, id)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n = users.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * validation).round() as usize).min(n - n_train);
    let ids: Vec<UserId> = keyed.into_iter().map(|(_, id)| id).collect();
    let part = |range: std::ops::Range<usize>| {
        let mut v = ids[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: part(0..n_train),
        validation: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{RegionGrid, Trajectory, Visit};
    use proptest::prelude::*;

    pub(crate) fn users(n: usize, positives: usize) -> Vec<UserRecord> {
        let g = RegionGrid::new(1, 1, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let t = Trajectory::new(i as u64, 0, vec![Visit { slot: 0, region: 0 }], &g).unwrap();
                UserRecord::new(i as u64, u8::from(i < positives), vec![t]).unwrap()
            })
            .collect()
    }

    fn prevalence(ids: &[UserId], positives: usize) -> f64 {
        ids.iter().filter(|&&id| (id as usize) < positives).count() as f64 / ids.len() as f64
    }

    #[test]
    fn hundred_users_split_80_10_10() {
        let s = split_users(&users(100, 30), SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn fifty_five_users_round_to_44() {
        let s = split_users(&users(55, 20), SplitFractions::default(), 3).unwrap();
        assert_eq!(s.train.len(), 44);
        let rest = (s.validation.len(), s.test.len());
        assert!(rest == (5, 6) || rest == (6, 5), "{rest:?}");
    }

    #[test]
    fn same_seed_same_split() {
        let u = users(120, 40);
        let a = split_users(&u, SplitFractions::default(), 9).unwrap();
        let b = split_users(&u, SplitFractions::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = split_users(&u, SplitFractions::default(), 10).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn too_few_users() {
        assert!(split_users(&users(9, 3), SplitFractions::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_stratification(n in 20usize..400, frac in 0.1f64..0.9, seed in 0u64..1000) {
            let positives = ((n as f64) * frac).round() as usize;
            let u = users(n, positives);
            let s = split_users(&u, SplitFractions::default(), seed).unwrap();
            let mut all: Vec<UserId> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
            let global = positives as f64 / n as f64;
            prop_assert!((prevalence(&s.train, positives) - global).abs() <= 0.05 + 1e-12);
            // Interleaving bounds the prevalence error of a k-user slice by 1/k.
            for part in [&s.validation, &s.test] {
                let k = part.len() as f64;
                prop_assert!((prevalence(part, positives) - global).abs() <= (1.0 / k).max(0.05) + 1e-12);
            }
            for (part, want) in [(&s.train, 0.8), (&s.validation, 0.1), (&s.test, 0.1)] {
                prop_assert!((part.len() as f64 - want * n as f64).abs() <= 1.0);
            }
        }
    }
}
