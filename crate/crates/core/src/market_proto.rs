//! Market-specific prototypes.
//!
//! A bilinear discriminator scores how strongly an item's embedding depends on
//! its neighbourhood in the market's item graph. The items with the highest
//! mutual-information estimate are pooled, weighted by that estimate, into a
//! single prototype vector per market.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use crate::data::MarketId;
use crate::gnn::{shuffle, EmbeddingTable};
use crate::graph::InteractionGraph;
use crate::numerics::{log_clamped, sigmoid, Adam, AdamConfig, Parameters, Tensor2};
use crate::rng::{self, Rng};
use crate::{math, Error, Result};

/// `T(q_i, q_N) = q_iᵀ M q_N + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub m: Tensor2,
    /// 1x1 bias.
    pub c: Tensor2,
}

impl Discriminator {
    /// The constant-zero scorer.
    pub fn zeros(dim: usize) -> Self {
        Self {
            m: Tensor2::zeros(dim, dim),
            c: Tensor2::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn bias(&self) -> f64 {
        self.c.get(0, 0)
    }

    pub fn score(&self, q: &[f64], q_n: &[f64]) -> f64 {
        let d = self.dim();
        let mut t = self.bias();
        for (r, &qr) in q.iter().enumerate().take(d) {
            if qr != 0.0 {
                t += qr * math::dot(self.m.row(r), q_n);
            }
        }
        t
    }
}

impl Parameters for Discriminator {
    fn tensors(&self) -> Vec<&Tensor2> {
        vec![&self.m, &self.c]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.m, &mut self.c]
    }
}

/// Mean embedding of the neighbours of item `item` (a node id); zeros when isolated.
pub fn neighborhood_mean(g: &InteractionGraph, q: &EmbeddingTable, item: usize) -> Result<Vec<f64>> {
    let local = g.local_index(item).ok_or(Error::UnknownId {
        kind: "item",
        id: item as u64,
    })?;
    check_rows(g, q)?;
    Ok(local_mean(g, q, local))
}

fn local_mean(g: &InteractionGraph, q: &EmbeddingTable, local: usize) -> Vec<f64> {
    let mut out = vec![0.0; q.dim()];
    let adj = g.adjacent(local);
    if adj.is_empty() {
        return out;
    }
    for &j in adj {
        for (o, x) in out.iter_mut().zip(q.row(j)) {
            *o += x;
        }
    }
    let inv = 1.0 / adj.len() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    out
}

/// Neighbourhood means of every node, by local index.
pub fn neighborhood_means(g: &InteractionGraph, q: &EmbeddingTable) -> Result<Tensor2> {
    check_rows(g, q)?;
    let mut out = Tensor2::zeros(g.n_nodes(), q.dim());
    for v in 0..g.n_nodes() {
        out.row_mut(v).copy_from_slice(&local_mean(g, q, v));
    }
    Ok(out)
}

fn check_rows(g: &InteractionGraph, q: &EmbeddingTable) -> Result<()> {
    if q.len() != g.n_nodes() {
        return Err(Error::shape(
            alloc::format!("{} embeddings", q.len()),
            alloc::format!("{} graph nodes", g.n_nodes()),
        ));
    }
    Ok(())
}

fn non_isolated(g: &InteractionGraph) -> Vec<usize> {
    (0..g.n_nodes()).filter(|&v| g.degree(v) > 0).collect()
}

/// `log σ(T_pos) + mean_j log(1 - σ(T_neg_j))` from precomputed scores.
fn mi_from_scores(pos: f64, neg: &[f64]) -> f64 {
    let neg_term = if neg.is_empty() {
        0.0
    } else {
        neg.iter().map(|&t| log_clamped(1.0 - sigmoid(t))).sum::<f64>() / neg.len() as f64
    };
    log_clamped(sigmoid(pos)) + neg_term
}

/// Draws `n` local indices uniformly (with replacement) from `pool`, never `exclude`.
fn draw_negatives(pool: &[usize], exclude: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let allowed = pool.iter().filter(|&&j| j != exclude).count();
    if allowed == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let j = pool[rng.random_range(0..pool.len())];
        if j != exclude {
            out.push(j);
        }
    }
    out
}

/// Mutual-information estimate for item `item` (node id) against `n_samples`
/// negatives drawn uniformly from `negative_pool` (node ids, `item` excluded).
pub fn mi_estimate(
    t: &Discriminator,
    g: &InteractionGraph,
    q: &EmbeddingTable,
    item: usize,
    negative_pool: &[usize],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let qn = neighborhood_mean(g, q, item)?;
    let local = g.local_index(item).expect("checked above");
    let pool: Vec<usize> = negative_pool
        .iter()
        .map(|&id| g.local_index(id).ok_or(Error::UnknownId { kind: "item", id: id as u64 }))
        .collect::<Result<_>>()?;
    let negs = draw_negatives(&pool, local, n_samples.max(1), rng);
    if negs.is_empty() {
        return Err(Error::invalid("negative_pool", "needs an item other than the scored one"));
    }
    let pos = t.score(q.row(local), &qn);
    let neg: Vec<f64> = negs.iter().map(|&j| t.score(q.row(local), &local_mean(g, q, j))).collect();
    Ok(mi_from_scores(pos, &neg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub neg_per_pos: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            neg_per_pos: 5,
        }
    }
}

/// Mean `Î` over `positives` (local indices) with fixed negatives, and its
/// gradient with respect to `T`. `means` holds the neighbourhood means.
pub fn objective_and_grad(
    t: &Discriminator,
    q: &EmbeddingTable,
    means: &Tensor2,
    positives: &[usize],
    negatives: &[Vec<usize>],
) -> (f64, Discriminator) {
    let mut grad = Discriminator::zeros(t.dim());
    let mut total = 0.0;
    let scale = 1.0 / positives.len() as f64;
    for (&i, negs) in positives.iter().zip(negatives) {
        let qi = q.row(i);
        let tp = t.score(qi, means.row(i));
        let neg_scores: Vec<f64> = negs.iter().map(|&j| t.score(qi, means.row(j))).collect();
        total += mi_from_scores(tp, &neg_scores);
        // d/dT log σ(T) = σ(-T); d/dT log(1 - σ(T)) = -σ(T).
        let gp = sigmoid(-tp) * scale;
        grad.m.add_outer(qi, means.row(i), gp).expect("square");
        let mut gc = gp;
        if !negs.is_empty() {
            let w = scale / negs.len() as f64;
            for (&j, &tn) in negs.iter().zip(&neg_scores) {
                let gn = -sigmoid(tn) * w;
                grad.m.add_outer(qi, means.row(j), gn).expect("square");
                gc += gn;
            }
        }
        grad.c.data_mut()[0] += gc;
    }
    (total * scale, grad)
}

/// Mean `Î` over the non-isolated nodes, with a fixed seed for the negatives.
pub fn mean_mi(t: &Discriminator, g: &InteractionGraph, q: &EmbeddingTable, n_samples: usize, seed: u64) -> Result<f64> {
    let pool = non_isolated(g);
    if pool.len() < 2 {
        return Err(Error::DegenerateGraph("need at least two non-isolated items"));
    }
    let scores = score_items(t, g, q, n_samples, seed)?;
    Ok(pool.iter().map(|&v| scores[v]).sum::<f64>() / pool.len() as f64)
}

/// Gradient ascent on the mean `Î` over non-isolated items. Each epoch is one
/// full-batch Adam step with freshly drawn negatives. Returns the trained
/// discriminator and the objective before each step.
pub fn train_discriminator_traced(
    g: &InteractionGraph,
    q: &EmbeddingTable,
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<(Discriminator, Vec<f64>)> {
    let means = neighborhood_means(g, q)?;
    let mut positives = non_isolated(g);
    if positives.len() < 2 {
        return Err(Error::DegenerateGraph("need at least two non-isolated items"));
    }
    let mut rng = rng::seeded(seed);
    let mut t = Discriminator::zeros(q.dim());
    let mut adam = Adam::for_model(AdamConfig::with_lr(config.lr), &t);
    let pool = positives.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        shuffle(&mut positives, &mut rng);
        let negatives: Vec<Vec<usize>> = positives
            .iter()
            .map(|&i| draw_negatives(&pool, i, config.neg_per_pos, &mut rng))
            .collect();
        let (obj, mut grad) = objective_and_grad(&t, q, &means, &positives, &negatives);
        trace.push(obj);
        // Ascent: hand the optimizer the negated gradient.
        for g in grad.tensors_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = -*x);
        }
        adam.step_model(&mut t, &grad)?;
    }
    Ok((t, trace))
}

pub fn train_discriminator(
    g: &InteractionGraph,
    q: &EmbeddingTable,
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<Discriminator> {
    train_discriminator_traced(g, q, config, seed).map(|(t, _)| t)
}

/// `Î` of every node (by local index). Negatives for node `v` come from a
/// generator seeded by `(seed, node id)`, so a score does not depend on the
/// order nodes are visited.
pub fn score_items(
    t: &Discriminator,
    g: &InteractionGraph,
    q: &EmbeddingTable,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let means = neighborhood_means(g, q)?;
    let pool = non_isolated(g);
    Ok((0..g.n_nodes())
        .map(|v| {
            let mut r = rng::seeded(rng::derive(seed, g.node_id(v) as u64));
            let negs = draw_negatives(&pool, v, n_samples.max(1), &mut r);
            let pos = t.score(q.row(v), means.row(v));
            let neg: Vec<f64> = negs.iter().map(|&j| t.score(q.row(v), means.row(j))).collect();
            mi_from_scores(pos, &neg)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedItem {
    /// Node id (dataset item index).
    pub item: usize,
    pub score: f64,
}

/// Top-`k_s` items by score (ties to the smaller id) among non-isolated nodes;
/// isolated nodes pad the selection by descending embedding norm.
pub fn select_items(g: &InteractionGraph, q: &EmbeddingTable, scores: &[f64], k_s: usize) -> Result<Vec<SelectedItem>> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::DegenerateGraph("item graph has no nodes"));
    }
    check_rows(g, q)?;
    if scores.len() != n {
        return Err(Error::shape(alloc::format!("{} scores", scores.len()), alloc::format!("{n} nodes")));
    }
    if k_s == 0 || k_s > n {
        return Err(Error::invalid("k_s", alloc::format!("need 1 <= k_s <= {n}, got {k_s}")));
    }
    let (mut linked, mut isolated): (Vec<usize>, Vec<usize>) = (0..n).partition(|&v| g.degree(v) > 0);
    linked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let norms: Vec<f64> = (0..n).map(|v| math::norm(q.row(v))).collect();
    isolated.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    Ok(linked
        .into_iter()
        .chain(isolated)
        .take(k_s)
        .map(|v| SelectedItem {
            item: g.node_id(v),
            score: scores[v],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketPrototype {
    pub market: MarketId,
    pub vector: Vec<f64>,
    pub selected: Vec<SelectedItem>,
}

/// Score-weighted mean of the selected items' embeddings; the plain mean when
/// the scores sum to (nearly) zero.
pub fn pool_prototype(
    market: MarketId,
    g: &InteractionGraph,
    q: &EmbeddingTable,
    selected: Vec<SelectedItem>,
) -> Result<MarketPrototype> {
    if selected.is_empty() {
        return Err(Error::invalid("selected", "must be nonempty"));
    }
    check_rows(g, q)?;
    let rows: Vec<&[f64]> = selected
        .iter()
        .map(|s| {
            g.local_index(s.item)
                .map(|v| q.row(v))
                .ok_or(Error::UnknownId { kind: "item", id: s.item as u64 })
        })
        .collect::<Result<_>>()?;
    let total: f64 = selected.iter().map(|s| s.score).sum();
    let uniform = total.abs() < 1e-9;
    let mut vector = vec![0.0; q.dim()];
    for (s, row) in selected.iter().zip(&rows) {
        let w = if uniform { 1.0 / selected.len() as f64 } else { s.score / total };
        for (o, x) in vector.iter_mut().zip(row.iter()) {
            *o += w * x;
        }
    }
    Ok(MarketPrototype { market, vector, selected })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketProtoConfig {
    pub discriminator: DiscriminatorConfig,
    pub k_s: usize,
    /// Negatives per item when scoring for selection.
    pub score_samples: usize,
}

impl Default for MarketProtoConfig {
    fn default() -> Self {
        Self {
            discriminator: DiscriminatorConfig::default(),
            k_s: 10,
            score_samples: 20,
        }
    }
}

/// Discriminator, scoring, selection and pooling for one market.
pub fn build_market_prototype(
    market: MarketId,
    g: &InteractionGraph,
    q: &EmbeddingTable,
    config: &MarketProtoConfig,
    seed: u64,
) -> Result<MarketPrototype> {
    let t = train_discriminator(g, q, &config.discriminator, seed)?;
    let scores = score_items(&t, g, q, config.score_samples, rng::derive(seed, 1))?;
    let selected = select_items(g, q, &scores, config.k_s)?;
    pool_prototype(market, g, q, selected)
}

/// Runs every market independently with the same seed; a failure in one
/// market is reported in its slot and does not stop the others.
pub fn build_all_market_prototypes(
    markets: &[(MarketId, &InteractionGraph, &EmbeddingTable)],
    config: &MarketProtoConfig,
    seed: u64,
) -> Vec<(MarketId, Result<MarketPrototype>)> {
    markets
        .iter()
        .map(|(m, g, q)| (m.clone(), build_market_prototype(m.clone(), g, q, config, seed)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::graph;
    use crate::numerics::finite_diff_check;
    use crate::user_proto::cosine_similarity;
    use proptest::prelude::*;

    const LN2: f64 = core::f64::consts::LN_2;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::from_rows(rows).unwrap()
    }

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        EmbeddingTable::random(n, d, 1.0, &mut rng::seeded(seed)).unwrap()
    }

    fn random_graph(n: usize, m: usize, seed: u64) -> InteractionGraph {
        let mut r = rng::seeded(seed);
        let edges: Vec<(usize, usize)> = (0..m).map(|_| (r.random_range(0..n), r.random_range(0..n))).collect();
        graph(n, &edges)
    }

    fn random_disc(d: usize, seed: u64) -> Discriminator {
        let mut t = Discriminator::zeros(d);
        rng::fill_normal(&mut rng::seeded(seed), t.m.data_mut(), 0.5);
        t.c.data_mut()[0] = 0.3;
        t
    }

    #[test]
    fn neighborhood_mean_cases() {
        let g = graph(3, &[(0, 1), (0, 2)]);
        let q = table(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(neighborhood_mean(&g, &q, 1).unwrap(), vec![9.0, 9.0]);
        assert_eq!(neighborhood_mean(&g, &q, 0).unwrap(), vec![0.5, 0.5]);
        assert!(neighborhood_mean(&g, &q, 7).is_err());
        let lone = graph(2, &[]);
        assert_eq!(neighborhood_mean(&lone, &random_table(2, 3, 0), 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn neighborhood_mean_matches_naive_sum() {
        let g = random_graph(15, 40, 3);
        let q = random_table(15, 4, 4);
        for v in 0..15 {
            let nbrs: Vec<usize> = (0..15).filter(|&u| g.has_edge(v, u)).collect();
            let got = neighborhood_mean(&g, &q, v).unwrap();
            for c in 0..4 {
                let oracle = if nbrs.is_empty() {
                    0.0
                } else {
                    nbrs.iter().map(|&u| q.row(u)[c]).sum::<f64>() / nbrs.len() as f64
                };
                assert!((got[c] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mi_at_zero_scorer_is_minus_two_ln_two() {
        let g = random_graph(10, 20, 1);
        let q = random_table(10, 3, 2);
        let t = Discriminator::zeros(3);
        let pool: Vec<usize> = (0..10).collect();
        let mi = mi_estimate(&t, &g, &q, 0, &pool, 5, &mut rng::seeded(0)).unwrap();
        assert!((mi + 2.0 * LN2).abs() < 1e-15);
        assert!((mean_mi(&t, &g, &q, 5, 0).unwrap() + 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn separating_scorer_approaches_zero() {
        // The upper clamp caps each term at ln(1 - 1e-12).
        assert!(mi_from_scores(50.0, &[-50.0, -60.0]) > -3e-12);
        assert!(mi_from_scores(50.0, &[-50.0]) <= 0.0);
        // Clamping keeps extreme scores finite.
        assert!((mi_from_scores(-1e6, &[1e6]) - 2.0 * math::ln(1e-12)).abs() < 1e-6);
    }

    #[test]
    fn mi_matches_formula() {
        let g = random_graph(12, 30, 5);
        let q = random_table(12, 3, 6);
        let t = random_disc(3, 7);
        let pool: Vec<usize> = (0..12).filter(|&v| g.degree(v) > 0).collect();
        for item in pool.iter().copied() {
            let seed = 100 + item as u64;
            let mi = mi_estimate(&t, &g, &q, item, &pool, 4, &mut rng::seeded(seed)).unwrap();
            // Replay the same draws.
            let negs = draw_negatives(&pool, item, 4, &mut rng::seeded(seed));
            let qi = q.row(item);
            let bil = |a: &[f64], b: &[f64]| {
                let mut s = t.bias();
                for r in 0..3 {
                    for c in 0..3 {
                        s += a[r] * t.m.get(r, c) * b[c];
                    }
                }
                s
            };
            let sig = |x: f64| 1.0 / (1.0 + math::exp(-x));
            let mut oracle = math::ln(sig(bil(qi, &neighborhood_mean(&g, &q, item).unwrap())));
            for &j in &negs {
                oracle += math::ln(1.0 - sig(bil(qi, &neighborhood_mean(&g, &q, j).unwrap()))) / 4.0;
            }
            assert!((mi - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let g = random_graph(10, 25, 8);
        let q = random_table(10, 3, 9);
        let means = neighborhood_means(&g, &q).unwrap();
        let t = random_disc(3, 10);
        let positives = non_isolated(&g);
        let mut r = rng::seeded(11);
        let negatives: Vec<Vec<usize>> = positives.iter().map(|&i| draw_negatives(&positives, i, 3, &mut r)).collect();
        let (_, grad) = objective_and_grad(&t, &q, &means, &positives, &negatives);
        let err = finite_diff_check(
            |x| {
                let mut probe = t.clone();
                probe.load_flat(x);
                objective_and_grad(&probe, &q, &means, &positives, &negatives).0
            },
            &t.flatten(),
            &grad.flatten(),
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    /// Cliques whose members share one embedding, so `q_N(i) = q_i`.
    fn dependent_instance() -> (InteractionGraph, EmbeddingTable) {
        let mut edges = Vec::new();
        let mut rows = Vec::new();
        let centres = random_table(8, 4, 21).normalized();
        for c in 0..8 {
            for a in 0..5 {
                rows.push(centres.row(c).to_vec());
                for b in a + 1..5 {
                    edges.push((c * 5 + a, c * 5 + b));
                }
            }
        }
        (graph(40, &edges), table(&rows))
    }

    #[test]
    fn training_raises_mi_under_dependence() {
        let (g, q) = dependent_instance();
        let cfg = DiscriminatorConfig::default();
        let before = mean_mi(&Discriminator::zeros(4), &g, &q, 10, 5).unwrap();
        let t = train_discriminator(&g, &q, &cfg, 1).unwrap();
        let after = mean_mi(&t, &g, &q, 10, 5).unwrap();
        assert!(after > before + 0.1, "{before} -> {after}");
    }

    #[test]
    fn training_stays_near_baseline_under_independence() {
        let g = random_graph(200, 600, 31);
        let q = random_table(200, 4, 32).normalized();
        let t = train_discriminator(&g, &q, &DiscriminatorConfig::default(), 2).unwrap();
        let after = mean_mi(&t, &g, &q, 20, 7).unwrap();
        assert!((after + 2.0 * LN2).abs() < 0.15, "{after}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_isolated_graphs() {
        let (g, q) = dependent_instance();
        let cfg = DiscriminatorConfig {
            epochs: 20,
            ..Default::default()
        };
        let a = train_discriminator(&g, &q, &cfg, 9).unwrap();
        let b = train_discriminator(&g, &q, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let lone = graph(4, &[]);
        assert!(matches!(
            train_discriminator(&lone, &random_table(4, 2, 0), &cfg, 0),
            Err(Error::DegenerateGraph(_))
        ));
    }

    #[test]
    fn selection_cases() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let q = random_table(3, 2, 0);
        let s = select_items(&g, &q, &[-0.2, -0.9, -0.1], 2).unwrap();
        assert_eq!(s.iter().map(|x| x.item).collect::<Vec<_>>(), vec![2, 0]);
        let all = select_items(&g, &q, &[0.0; 3], 3).unwrap();
        assert_eq!(all.iter().map(|x| x.item).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(select_items(&g, &q, &[0.0; 3], 4).is_err());
        assert!(select_items(&graph(0, &[]), &EmbeddingTable::new(Tensor2::zeros(0, 2)).unwrap(), &[], 1).is_err());
    }

    #[test]
    fn isolated_items_pad_by_norm() {
        let g = graph(4, &[(0, 1)]);
        let q = table(&[vec![0.1, 0.0], vec![0.1, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]);
        let s = select_items(&g, &q, &[-1.0, -2.0, -0.1, -0.1], 3).unwrap();
        assert_eq!(s.iter().map(|x| x.item).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn selection_matches_exhaustive_search() {
        for seed in 0..20u64 {
            let n = 12;
            let g = random_graph(n, 40, seed);
            let q = random_table(n, 2, seed);
            let mut r = rng::seeded(seed + 99);
            let scores: Vec<f64> = (0..n).map(|_| -r.random::<f64>()).collect();
            let linked: Vec<usize> = (0..n).filter(|&v| g.degree(v) > 0).collect();
            if linked.len() < 3 {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..linked.len() {
                for b in a + 1..linked.len() {
                    for c in b + 1..linked.len() {
                        best = best.max(scores[linked[a]] + scores[linked[b]] + scores[linked[c]]);
                    }
                }
            }
            let got: f64 = select_items(&g, &q, &scores, 3).unwrap().iter().map(|s| s.score).sum();
            assert!((got - best).abs() < 1e-12);
        }
    }

    fn market() -> MarketId {
        MarketId::new("de").unwrap()
    }

    #[test]
    fn pooling_cases() {
        let g = graph(3, &[(0, 1)]);
        let q = table(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![5.0, 5.0]]);
        let one = pool_prototype(market(), &g, &q, vec![SelectedItem { item: 1, score: -0.7 }]).unwrap();
        assert_eq!(one.vector, vec![3.0, 0.0]);
        let two = pool_prototype(
            market(),
            &g,
            &q,
            vec![SelectedItem { item: 0, score: -0.5 }, SelectedItem { item: 1, score: -0.5 }],
        )
        .unwrap();
        assert_eq!(two.vector, vec![2.0, 1.0]);
        let cancel = pool_prototype(
            market(),
            &g,
            &q,
            vec![SelectedItem { item: 0, score: 0.5 }, SelectedItem { item: 2, score: -0.5 }],
        )
        .unwrap();
        assert_eq!(cancel.vector, vec![3.0, 3.5]);
        assert!(pool_prototype(market(), &g, &q, vec![]).is_err());
    }

    #[test]
    fn pooling_matches_weighted_sum() {
        for seed in 0..50u64 {
            let g = random_graph(6, 8, seed);
            let q = random_table(6, 3, seed);
            let mut r = rng::seeded(seed);
            let sel: Vec<SelectedItem> = (0..4)
                .map(|i| SelectedItem {
                    item: i,
                    score: -0.1 - r.random::<f64>(),
                })
                .collect();
            let p = pool_prototype(market(), &g, &q, sel.clone()).unwrap();
            let z: f64 = sel.iter().map(|s| s.score).sum();
            for c in 0..3 {
                let oracle: f64 = sel.iter().map(|s| s.score * q.row(s.item)[c]).sum::<f64>() / z;
                assert!((p.vector[c] - oracle).abs() < 1e-10);
            }
        }
    }

    /// Two markets whose item graphs are disjoint dense blocks with their own embedding clusters.
    fn block(offset: usize, centre: usize, seed: u64) -> (InteractionGraph, EmbeddingTable) {
        let n = 12;
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push((a, b));
            }
        }
        let g = InteractionGraph::from_edges((offset..offset + n).collect(), &edges).unwrap();
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut x = vec![0.0; 4];
                rng::fill_normal(&mut r, &mut x, 0.2);
                x[centre] += 1.0;
                x
            })
            .collect();
        (g, table(&rows))
    }

    #[test]
    fn disjoint_blocks_give_distinct_prototypes() {
        let (g1, q1) = block(0, 0, 1);
        let (g2, q2) = block(12, 1, 2);
        let cfg = MarketProtoConfig {
            k_s: 5,
            ..Default::default()
        };
        let out = build_all_market_prototypes(
            &[(MarketId::new("de").unwrap(), &g1, &q1), (MarketId::new("jp").unwrap(), &g2, &q2)],
            &cfg,
            3,
        );
        assert_eq!(out.len(), 2);
        let a = out[0].1.as_ref().unwrap();
        let b = out[1].1.as_ref().unwrap();
        assert!(a.selected.iter().all(|s| s.item < 12));
        assert!(b.selected.iter().all(|s| s.item >= 12));
        let cross = cosine_similarity(&a.vector, &b.vector);
        let mut intra = 0.0;
        let mut pairs = 0.0;
        for i in 0..12 {
            for j in i + 1..12 {
                intra += cosine_similarity(q1.row(i), q1.row(j));
                pairs += 1.0;
            }
        }
        assert!(cross < intra / pairs);
    }

    #[test]
    fn identical_markets_get_identical_prototypes() {
        let (g, q) = block(0, 2, 5);
        let cfg = MarketProtoConfig {
            k_s: 4,
            ..Default::default()
        };
        let out = build_all_market_prototypes(
            &[(MarketId::new("de").unwrap(), &g, &q), (MarketId::new("fr").unwrap(), &g, &q)],
            &cfg,
            8,
        );
        let a = out[0].1.as_ref().unwrap();
        let b = out[1].1.as_ref().unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.selected, b.selected);
        let single = build_all_market_prototypes(&[(market(), &g, &q)], &cfg, 8);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn failing_market_does_not_stop_others() {
        let (g, q) = block(0, 0, 1);
        let lone = graph(3, &[]);
        let lq = random_table(3, 4, 0);
        let out = build_all_market_prototypes(
            &[(MarketId::new("de").unwrap(), &lone, &lq), (MarketId::new("jp").unwrap(), &g, &q)],
            &MarketProtoConfig::default(),
            0,
        );
        assert!(out[0].1.is_err());
        assert!(out[1].1.is_ok());
    }

    proptest! {
        #[test]
        fn mi_is_never_positive(seed in 0u64..5000) {
            let g = random_graph(10, 20, seed);
            let q = random_table(10, 3, seed + 1);
            let t = random_disc(3, seed + 2);
            for s in score_items(&t, &g, &q, 5, seed).unwrap() {
                prop_assert!(s <= 0.0);
            }
        }

        #[test]
        fn equal_scores_pool_to_the_mean(seed in 0u64..5000, score in -3.0f64..-0.01, k in 1usize..6) {
            let g = random_graph(6, 10, seed);
            let q = random_table(6, 3, seed);
            let sel: Vec<SelectedItem> = (0..k).map(|item| SelectedItem { item, score }).collect();
            let p = pool_prototype(market(), &g, &q, sel).unwrap();
            for c in 0..3 {
                let mean = (0..k).map(|v| q.row(v)[c]).sum::<f64>() / k as f64;
                prop_assert!((p.vector[c] - mean).abs() < 1e-12);
            }
        }
    }
}
