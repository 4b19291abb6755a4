//! Multi-market implicit-feedback datasets.
//!
//! Users belong to exactly one market; items form one catalogue shared by all
//! markets. Internally users and items are addressed by dense indices
//! (`0..n_users`, `0..n_items`) assigned in ascending order of their raw ids.

mod split;
mod synth;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

pub use split::{filter_min_interactions, leave_one_out_split, sample_negatives, sample_negatives_excluding, SplitDataset, TestCase};
pub use synth::{generate_synthetic, market_code, SynthConfig};

/// Short lowercase market code such as `de` or `jp`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MarketId(String);

impl MarketId {
    /// Accepts nonempty codes made of lowercase ASCII letters, digits, `_` or `-`.
    pub fn new(code: &str) -> Result<Self> {
        let ok = !code.is_empty()
            && code
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if ok {
            Ok(Self(code.to_string()))
        } else {
            Err(Error::UnknownMarket(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MarketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One row as it appears in an interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub market: MarketId,
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

/// A deduplicated interaction in dense-index form. The market is implied by the user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    markets: Vec<MarketId>,
    user_ids: Vec<u64>,
    user_market: Vec<usize>,
    item_ids: Vec<u64>,
    /// Sorted by `(user, item)`; at most one entry per pair.
    interactions: Vec<Interaction>,
}

impl Dataset {
    /// Builds a dataset from raw rows. Duplicate `(user, item)` pairs keep the
    /// earliest timestamp; a user seen in two markets is an error.
    pub fn from_records<I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = RawInteraction>,
    {
        let mut user_market: BTreeMap<u64, MarketId> = BTreeMap::new();
        let mut pairs: BTreeMap<(u64, u64), i64> = BTreeMap::new();
        for r in records {
            match user_market.get(&r.user) {
                Some(m) if *m != r.market => {
                    return Err(Error::UserInMultipleMarkets {
                        user: r.user,
                        first: m.to_string(),
                        second: r.market.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    user_market.insert(r.user, r.market.clone());
                }
            }
            pairs
                .entry((r.user, r.item))
                .and_modify(|t| *t = (*t).min(r.timestamp))
                .or_insert(r.timestamp);
        }
        let item_vocab: Vec<u64> = {
            let mut v: Vec<u64> = pairs.keys().map(|&(_, i)| i).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        Self::assemble(user_market, item_vocab, pairs)
    }

    fn assemble(
        user_market: BTreeMap<u64, MarketId>,
        item_ids: Vec<u64>,
        pairs: BTreeMap<(u64, u64), i64>,
    ) -> Result<Self> {
        let mut markets: Vec<MarketId> = user_market.values().cloned().collect();
        markets.sort();
        markets.dedup();
        let user_ids: Vec<u64> = user_market.keys().copied().collect();
        let user_market_idx = user_market
            .values()
            .map(|m| markets.binary_search(m).expect("market collected above"))
            .collect();
        let mut interactions = Vec::with_capacity(pairs.len());
        for (&(u, i), &t) in &pairs {
            let user = user_ids.binary_search(&u).expect("user collected above");
            let item = item_ids
                .binary_search(&i)
                .map_err(|_| Error::UnknownId { kind: "item", id: i })?;
            interactions.push(Interaction { user, item, timestamp: t });
        }
        Ok(Self {
            markets,
            user_ids,
            user_market: user_market_idx,
            item_ids,
            interactions,
        })
    }

    /// Same vocabulary, different interaction list (used for train views).
    pub(crate) fn with_interactions(&self, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_unstable();
        Self {
            markets: self.markets.clone(),
            user_ids: self.user_ids.clone(),
            user_market: self.user_market.clone(),
            item_ids: self.item_ids.clone(),
            interactions,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn markets(&self) -> &[MarketId] {
        &self.markets
    }

    pub fn n_markets(&self) -> usize {
        self.markets.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_id(&self, user: usize) -> u64 {
        self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> u64 {
        self.item_ids[item]
    }

    pub fn user_ids(&self) -> &[u64] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn user_index(&self, raw: u64) -> Option<usize> {
        self.user_ids.binary_search(&raw).ok()
    }

    pub fn item_index(&self, raw: u64) -> Option<usize> {
        self.item_ids.binary_search(&raw).ok()
    }

    pub fn market_index(&self, code: &str) -> Option<usize> {
        self.markets.iter().position(|m| m.as_str() == code)
    }

    /// Market index of a user.
    pub fn market_of(&self, user: usize) -> usize {
        self.user_market[user]
    }

    pub fn user_markets(&self) -> &[usize] {
        &self.user_market
    }

    /// Interactions of one user, sorted by item.
    pub fn user_interactions(&self, user: usize) -> &[Interaction] {
        let lo = self.interactions.partition_point(|it| it.user < user);
        let hi = self.interactions.partition_point(|it| it.user <= user);
        &self.interactions[lo..hi]
    }

    pub fn users_in_market(&self, market: usize) -> Vec<usize> {
        (0..self.n_users()).filter(|&u| self.user_market[u] == market).collect()
    }

    /// Sorted item lists per user.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for it in &self.interactions {
            out[it.user].push(it.item);
        }
        out
    }

    /// Sorted user lists per item.
    pub fn users_by_item(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_items()];
        for it in &self.interactions {
            out[it.item].push(it.user);
        }
        out
    }

    /// Rows back in raw-id form, ordered by `(user, item)`.
    pub fn to_records(&self) -> Vec<RawInteraction> {
        self.interactions
            .iter()
            .map(|it| RawInteraction {
                market: self.markets[self.user_market[it.user]].clone(),
                user: self.user_ids[it.user],
                item: self.item_ids[it.item],
                timestamp: it.timestamp,
            })
            .collect()
    }
}
