use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{Dataset, MarketId, RawInteraction};
use crate::{rng, Error, Result};

const MARKET_CODES: [&str; 8] = ["de", "jp", "in", "fr", "ca", "mx", "uk", "us"];

/// Planted cross-market behaviour groups.
///
/// Group `k` owns items `k*items_per_group .. (k+1)*items_per_group`; items past
/// the last block belong to no group. Every user draws a group uniformly,
/// independently of its market.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub markets: usize,
    pub users_per_market: usize,
    pub items: usize,
    pub groups: usize,
    pub items_per_group: usize,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            markets: 3,
            users_per_market: 200,
            items: 300,
            groups: 4,
            items_per_group: 75,
            p_in: 0.3,
            p_out: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.markets == 0 || self.users_per_market == 0 || self.items == 0 {
            return Err(Error::invalid("markets/users_per_market/items", "must be positive"));
        }
        if self.groups == 0 || self.items_per_group == 0 {
            return Err(Error::invalid("groups", "need at least one group with at least one item"));
        }
        if self.groups * self.items_per_group > self.items {
            return Err(Error::invalid(
                "items_per_group",
                format!("{} groups x {} items exceed {} items", self.groups, self.items_per_group, self.items),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return Err(Error::invalid("p_in/p_out", "probabilities must lie in [0, 1]"));
        }
        if self.p_in <= self.p_out {
            return Err(Error::invalid("p_in", "must exceed p_out"));
        }
        Ok(())
    }

    pub fn group_of_item(&self, item: u64) -> Option<usize> {
        let g = item as usize / self.items_per_group;
        (g < self.groups).then_some(g)
    }
}

/// Market code used for synthetic market `l`.
pub fn market_code(l: usize) -> MarketId {
    match MARKET_CODES.get(l) {
        Some(code) => MarketId::new(code).expect("static code"),
        None => MarketId::new(&format!("m{l}")).expect("generated code"),
    }
}

/// Samples a dataset with Bernoulli interactions: `p_in` inside the user's
/// group block, `p_out` elsewhere. User `u` of market `l` gets raw id
/// `l * users_per_market + u`; item ids are `0..items`; timestamps are random.
///
/// Returns the dataset and the planted group of every user (by raw id order).
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let mut rows = Vec::new();
    let mut groups = Vec::with_capacity(config.markets * config.users_per_market);
    for l in 0..config.markets {
        let market = market_code(l);
        for u in 0..config.users_per_market {
            let user = (l * config.users_per_market + u) as u64;
            let group = r.random_range(0..config.groups);
            groups.push(group);
            for item in 0..config.items as u64 {
                let p = if config.group_of_item(item) == Some(group) {
                    config.p_in
                } else {
                    config.p_out
                };
                if r.random_bool(p) {
                    rows.push(RawInteraction {
                        market: market.clone(),
                        user,
                        item,
                        timestamp: r.random_range(0..1_000_000_000i64),
                    });
                }
            }
        }
    }
    Ok((Dataset::from_records(rows)?, groups))
}
