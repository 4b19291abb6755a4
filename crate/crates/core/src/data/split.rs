use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use super::{Dataset, Interaction};
use crate::rng::Rng;
use crate::{Error, Result};

/// One held-out interaction; indices refer to the train dataset's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TestCase {
    pub user: usize,
    pub item: usize,
    pub market: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    /// All users and items of the source dataset, minus the held-out interactions.
    pub train: Dataset,
    /// One entry per user, sorted by user.
    pub test: Vec<TestCase>,
}

/// Repeatedly drops users and items with fewer than `min_count` interactions
/// until every survivor meets the threshold.
pub fn filter_min_interactions(ds: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count == 0 {
        return Err(Error::invalid("min_count", "must be at least 1"));
    }
    let inter = ds.interactions();
    let mut alive = vec![true; inter.len()];
    loop {
        let mut user_deg = vec![0usize; ds.n_users()];
        let mut item_deg = vec![0usize; ds.n_items()];
        for (it, _) in inter.iter().zip(&alive).filter(|(_, &a)| a) {
            user_deg[it.user] += 1;
            item_deg[it.item] += 1;
        }
        let mut changed = false;
        for (it, a) in inter.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[it.user] < min_count || item_deg[it.item] < min_count) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let records = ds.to_records();
    Dataset::from_records(records.into_iter().zip(alive).filter(|(_, a)| *a).map(|(r, _)| r))
}

/// Holds out each user's latest interaction (ties: largest item id).
pub fn leave_one_out_split(ds: &Dataset) -> Result<SplitDataset> {
    let mut train: Vec<Interaction> = Vec::with_capacity(ds.interactions().len());
    let mut test = Vec::with_capacity(ds.n_users());
    for user in 0..ds.n_users() {
        let rows = ds.user_interactions(user);
        if rows.len() < 2 {
            return Err(Error::TooFewInteractions {
                user: ds.user_id(user),
                count: rows.len(),
            });
        }
        let held = rows
            .iter()
            .max_by_key(|it| (it.timestamp, it.item))
            .expect("at least two rows");
        test.push(TestCase {
            user,
            item: held.item,
            market: ds.market_of(user),
        });
        train.extend(rows.iter().filter(|it| it.item != held.item));
    }
    Ok(SplitDataset {
        train: ds.with_interactions(train),
        test,
    })
}

/// `n` distinct items the user has not interacted with in `train`, drawn
/// uniformly without replacement.
pub fn sample_negatives(train: &Dataset, user: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    sample_negatives_excluding(train, user, &[], n, rng)
}

/// As [`sample_negatives`], additionally excluding the items in `exclude`.
pub fn sample_negatives_excluding(
    train: &Dataset,
    user: usize,
    exclude: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if user >= train.n_users() {
        return Err(Error::UnknownId { kind: "user", id: user as u64 });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut blocked = vec![false; train.n_items()];
    for it in train.user_interactions(user) {
        blocked[it.item] = true;
    }
    for &i in exclude {
        if i < blocked.len() {
            blocked[i] = true;
        }
    }
    let candidates: Vec<usize> = (0..train.n_items()).filter(|&i| !blocked[i]).collect();
    if candidates.len() < n {
        return Err(Error::InsufficientCandidates {
            user: train.user_id(user),
            available: candidates.len(),
            requested: n,
        });
    }
    Ok(index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|k| candidates[k])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::raw;
    use crate::data::RawInteraction;
    use crate::rng;
    use alloc::collections::BTreeSet;
    use rand::Rng as _;

    /// Single filtering pass; the oracle applies it until nothing changes.
    fn one_pass(records: &[RawInteraction], c: usize) -> Vec<RawInteraction> {
        let mut ucount = alloc::collections::BTreeMap::new();
        let mut icount = alloc::collections::BTreeMap::new();
        for r in records {
            *ucount.entry(r.user).or_insert(0usize) += 1;
            *icount.entry(r.item).or_insert(0usize) += 1;
        }
        records
            .iter()
            .filter(|r| ucount[&r.user] >= c && icount[&r.item] >= c)
            .cloned()
            .collect()
    }

    fn oracle_filter(records: Vec<RawInteraction>, c: usize) -> Vec<RawInteraction> {
        let mut cur = records;
        loop {
            let next = one_pass(&cur, c);
            if next.len() == cur.len() {
                return next;
            }
            cur = next;
        }
    }

    #[test]
    fn sparse_user_is_removed() {
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                rows.push(raw("de", u, i, 0));
            }
        }
        rows.push(raw("de", 99, 0, 0));
        let ds = Dataset::from_records(rows).unwrap();
        let f = filter_min_interactions(&ds, 5).unwrap();
        assert_eq!(f.n_users(), 5);
        assert!(f.user_index(99).is_none());
    }

    #[test]
    fn dense_dataset_is_a_fixed_point() {
        let rows: Vec<_> = (0..3).flat_map(|u| (0..3).map(move |i| raw("de", u, i, i as i64))).collect();
        let ds = Dataset::from_records(rows).unwrap();
        assert_eq!(filter_min_interactions(&ds, 3).unwrap(), ds);
        assert!(filter_min_interactions(&ds, 0).is_err());
    }

    #[test]
    fn cascading_removal() {
        // Item 9 has two users; user 2 has two items. Threshold 2 keeps them,
        // but user 3 (one item: 9) drops, which drops item 9 to one user and
        // then user 2 to one item.
        let rows = vec![
            raw("de", 1, 1, 0),
            raw("de", 1, 2, 0),
            raw("de", 4, 1, 0),
            raw("de", 4, 2, 0),
            raw("de", 2, 9, 0),
            raw("de", 2, 1, 0),
            raw("de", 3, 9, 0),
        ];
        let ds = Dataset::from_records(rows.clone()).unwrap();
        let f = filter_min_interactions(&ds, 2).unwrap();
        assert!(f.item_index(9).is_none());
        assert!(f.user_index(3).is_none());
        let expected = Dataset::from_records(oracle_filter(rows, 2)).unwrap();
        assert_eq!(f, expected);
    }

    #[test]
    fn filter_matches_iterated_single_pass_oracle() {
        let mut r = rng::seeded(11);
        for trial in 0..30 {
            let rows: Vec<_> = (0..120)
                .map(|_| {
                    let u = r.random_range(0..25u64);
                    let m = if u % 2 == 0 { "de" } else { "jp" };
                    raw(m, u, r.random_range(0..30u64), 0)
                })
                .collect();
            let ds = Dataset::from_records(rows.clone()).unwrap();
            let c = 1 + trial % 5;
            let f = filter_min_interactions(&ds, c).unwrap();
            let dedup = ds.to_records();
            assert_eq!(f, Dataset::from_records(oracle_filter(dedup, c)).unwrap());
            let users = f.items_by_user();
            let items = f.users_by_item();
            assert!(users.iter().all(|v| v.len() >= c));
            assert!(items.iter().all(|v| v.len() >= c));
        }
    }

    #[test]
    fn latest_timestamp_is_held_out() {
        let ds = Dataset::from_records([raw("de", 1, 5, 1), raw("de", 1, 6, 3), raw("de", 1, 7, 2)]).unwrap();
        let s = leave_one_out_split(&ds).unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(ds.item_id(s.test[0].item), 6);
        assert_eq!(s.train.interactions().len(), 2);
    }

    #[test]
    fn timestamp_ties_hold_out_largest_item() {
        let ds = Dataset::from_records([raw("de", 1, 5, 0), raw("de", 1, 9, 0), raw("de", 1, 7, 0)]).unwrap();
        let s = leave_one_out_split(&ds).unwrap();
        assert_eq!(ds.item_id(s.test[0].item), 9);
    }

    #[test]
    fn single_interaction_user_is_an_error() {
        let ds = Dataset::from_records([raw("de", 1, 5, 0), raw("de", 2, 5, 0), raw("de", 2, 6, 0)]).unwrap();
        assert_eq!(
            leave_one_out_split(&ds).unwrap_err(),
            Error::TooFewInteractions { user: 1, count: 1 }
        );
    }

    #[test]
    fn split_partitions_interactions() {
        let mut r = rng::seeded(5);
        let mut rows = Vec::new();
        for u in 0..100u64 {
            let m = ["de", "jp", "fr"][(u % 3) as usize];
            for _ in 0..r.random_range(2..8) {
                rows.push(raw(m, u, r.random_range(0..40u64), r.random_range(0..5i64)));
            }
        }
        let ds = Dataset::from_records(rows).unwrap();
        let ds = filter_min_interactions(&ds, 2).unwrap();
        let s = leave_one_out_split(&ds).unwrap();
        assert_eq!(s.test.len(), ds.n_users());
        let train_items = s.train.items_by_user();
        let mut union: BTreeSet<(usize, usize)> = s.train.interactions().iter().map(|i| (i.user, i.item)).collect();
        for t in &s.test {
            assert!(!train_items[t.user].contains(&t.item));
            assert_eq!(t.market, ds.market_of(t.user));
            assert!(union.insert((t.user, t.item)));
        }
        let all: BTreeSet<(usize, usize)> = ds.interactions().iter().map(|i| (i.user, i.item)).collect();
        assert_eq!(union, all);
    }

    #[test]
    fn negatives_forced_set() {
        let mut rows: Vec<_> = (0..10).map(|i| raw("de", 1, i, 0)).collect();
        rows.push(raw("de", 2, 10, 0));
        rows.push(raw("de", 2, 11, 0));
        rows.push(raw("de", 2, 12, 0));
        let ds = Dataset::from_records(rows).unwrap();
        let u = ds.user_index(1).unwrap();
        let mut got = sample_negatives(&ds, u, 3, &mut rng::seeded(0)).unwrap();
        got.sort_unstable();
        let raw_ids: Vec<u64> = got.iter().map(|&i| ds.item_id(i)).collect();
        assert_eq!(raw_ids, vec![10, 11, 12]);
        assert!(sample_negatives(&ds, u, 0, &mut rng::seeded(0)).unwrap().is_empty());
        assert!(matches!(
            sample_negatives(&ds, u, 4, &mut rng::seeded(0)),
            Err(Error::InsufficientCandidates { available: 3, .. })
        ));
    }

    #[test]
    fn negatives_are_deterministic_and_disjoint() {
        let rows: Vec<_> = (0..50u64).flat_map(|u| (0..5).map(move |k| raw("de", u, (u * 7 + k * 13) % 60, 0))).collect();
        let ds = Dataset::from_records(rows).unwrap();
        let items = ds.items_by_user();
        for u in 0..ds.n_users() {
            let a = sample_negatives(&ds, u, 20, &mut rng::seeded(9)).unwrap();
            let b = sample_negatives(&ds, u, 20, &mut rng::seeded(9)).unwrap();
            assert_eq!(a, b);
            let set: BTreeSet<_> = a.iter().collect();
            assert_eq!(set.len(), 20);
            assert!(a.iter().all(|i| !items[u].contains(i)));
        }
    }
}
