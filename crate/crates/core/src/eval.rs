//! Leave-one-out ranking evaluation: each test user's held-out item is ranked
//! against sampled unseen items, and HR@K / nDCG@K are averaged per market
//! and over all users.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{sample_negatives_excluding, SplitDataset, TestCase};
use crate::heads::{HeadParameters, PrototypeContext};
use crate::{math, rng, Error, Result};

/// Anything that scores (user, item) pairs; higher means more relevant.
pub trait Scorer {
    fn score(&self, user: usize, item: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64> Scorer for F {
    fn score(&self, user: usize, item: usize) -> f64 {
        self(user, item)
    }
}

/// Scores with a trained head's logit.
pub struct HeadScorer<'a> {
    pub params: &'a HeadParameters,
    pub ctx: &'a PrototypeContext,
}

impl Scorer for HeadScorer<'_> {
    fn score(&self, user: usize, item: usize) -> f64 {
        self.params.logit(self.ctx, user, item).unwrap_or(f64::NEG_INFINITY)
    }
}

/// 1-based rank of `held_out` among itself and `negatives`. Candidates that
/// tie with it are counted above it, as are NaN scores.
pub fn rank_candidates<S: Scorer + ?Sized>(model: &S, user: usize, held_out: usize, negatives: &[usize]) -> Result<usize> {
    let mut all: Vec<usize> = negatives.to_vec();
    all.push(held_out);
    all.sort_unstable();
    if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateCandidate(w[0]));
    }
    let target = model.score(user, held_out);
    let above = negatives
        .iter()
        .filter(|&&j| {
            let s = model.score(user, j);
            !(s < target)
        })
        .count();
    Ok(1 + above)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / math::log2(rank as f64 + 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_negatives: 99,
            seed: 0,
        }
    }
}

/// Outcome for one test user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserResult {
    pub user: usize,
    pub market: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub hr: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    pub k: usize,
    /// `(market index, metrics)` for every market with at least one test user, ascending.
    pub per_market: Vec<(usize, MetricRow)>,
    pub overall: MetricRow,
    /// Markets with no test users.
    pub omitted: Vec<usize>,
}

impl RankingMetrics {
    pub fn market(&self, market: usize) -> Option<&MetricRow> {
        self.per_market.iter().find(|(m, _)| *m == market).map(|(_, r)| r)
    }
}

/// Candidate set for one test case: negatives come from a generator seeded by
/// `(seed, user)`, so they do not depend on which other users are evaluated.
pub fn candidates_for(split: &SplitDataset, case: &TestCase, config: &EvalConfig) -> Result<Vec<usize>> {
    let mut r = rng::seeded(rng::derive(config.seed, case.user as u64));
    sample_negatives_excluding(&split.train, case.user, &[case.item], config.n_negatives, &mut r)
}

pub fn evaluate_case<S: Scorer + ?Sized>(
    model: &S,
    split: &SplitDataset,
    case: &TestCase,
    config: &EvalConfig,
) -> Result<UserResult> {
    let negatives = candidates_for(split, case, config)?;
    Ok(UserResult {
        user: case.user,
        market: case.market,
        rank: rank_candidates(model, case.user, case.item, &negatives)?,
    })
}

/// Means per market and overall. Results are sorted by user first so the
/// sums do not depend on evaluation order.
pub fn aggregate(mut results: Vec<UserResult>, n_markets: usize, k: usize) -> RankingMetrics {
    results.sort_by_key(|r| r.user);
    let mut hr = vec![0.0; n_markets];
    let mut ndcg = vec![0.0; n_markets];
    let mut count = vec![0usize; n_markets];
    let (mut hr_all, mut ndcg_all) = (0.0, 0.0);
    for r in &results {
        let (h, n) = (hr_at_k(r.rank, k), ndcg_at_k(r.rank, k));
        hr[r.market] += h;
        ndcg[r.market] += n;
        count[r.market] += 1;
        hr_all += h;
        ndcg_all += n;
    }
    let row = |h: f64, n: f64, c: usize| MetricRow {
        hr: if c == 0 { 0.0 } else { h / c as f64 },
        ndcg: if c == 0 { 0.0 } else { n / c as f64 },
        n_users: c,
    };
    let mut per_market = Vec::new();
    let mut omitted = Vec::new();
    for m in 0..n_markets {
        if count[m] == 0 {
            omitted.push(m);
        } else {
            per_market.push((m, row(hr[m], ndcg[m], count[m])));
        }
    }
    RankingMetrics {
        k,
        per_market,
        overall: row(hr_all, ndcg_all, results.len()),
        omitted,
    }
}

/// Ranks every test case's held-out item against `n_negatives` unseen items.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, split: &SplitDataset, config: &EvalConfig) -> Result<RankingMetrics> {
    let results = split
        .test
        .iter()
        .map(|case| evaluate_case(model, split, case, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(results, split.train.n_markets(), config.k))
}
