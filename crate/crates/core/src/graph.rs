//! Co-interaction graphs.
//!
//! The user graph links two users (across all markets) when they share at
//! least `min_common_items` items; a market's item graph links two items when
//! at least `min_common_users` users of that market interacted with both.
//! Edges are unweighted and isolated nodes are kept.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::{Error, Result};

/// Undirected simple graph in CSR form over an ordered set of node ids.
///
/// Node ids are external (dataset) indices; algorithms work on local indices
/// `0..n_nodes()` in ascending node-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    node_ids: Vec<usize>,
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
}

impl InteractionGraph {
    /// Builds a graph from local-index edges. Duplicates and self-loops are dropped.
    pub fn from_edges(node_ids: Vec<usize>, edges: &[(usize, usize)]) -> Result<Self> {
        if node_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("node_ids", "must be strictly increasing"));
        }
        let n = node_ids.len();
        let mut lists = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::UnknownId {
                    kind: "node",
                    id: a.max(b) as u64,
                });
            }
            if a != b {
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adjacency = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            adjacency.extend_from_slice(&l);
            offsets.push(adjacency.len());
        }
        Ok(Self {
            node_ids,
            offsets,
            adjacency,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Number of undirected edges `m`.
    pub fn edge_count(&self) -> usize {
        self.adjacency.len() / 2
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn node_id(&self, local: usize) -> usize {
        self.node_ids[local]
    }

    pub fn local_index(&self, node_id: usize) -> Option<usize> {
        self.node_ids.binary_search(&node_id).ok()
    }

    /// Sorted local neighbours of a local node.
    #[inline]
    pub fn adjacent(&self, local: usize) -> &[usize] {
        &self.adjacency[self.offsets[local]..self.offsets[local + 1]]
    }

    #[inline]
    pub fn degree(&self, local: usize) -> usize {
        self.offsets[local + 1] - self.offsets[local]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|v| self.degree(v)).collect()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n_nodes()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacent(a).binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |a| self.adjacent(a).iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    /// Same edge set relabelled through `perm` (`perm[old] = new`), keeping node ids by position.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = self.edges().map(|(a, b)| (perm[a], perm[b])).collect();
        Self::from_edges(self.node_ids.clone(), &edges)
    }
}

/// Sorted neighbour node ids of node id `v`.
pub fn neighbors(g: &InteractionGraph, v: usize) -> Result<Vec<usize>> {
    let local = g.local_index(v).ok_or(Error::UnknownId { kind: "node", id: v as u64 })?;
    Ok(g.adjacent(local).iter().map(|&u| g.node_id(u)).collect())
}

/// Pairs of entities sharing at least `threshold` keys.
///
/// `entity_keys[e]` lists the keys of entity `e`; `key_entities[k]` lists the
/// entities holding key `k`. Counting walks each entity's keys' posting lists,
/// so cost is proportional to the number of co-occurrences, not `n²`.
fn threshold_pairs(entity_keys: &[Vec<usize>], key_entities: &[Vec<usize>], threshold: usize) -> Vec<(usize, usize)> {
    let n = entity_keys.len();
    let mut counts = vec![0usize; n];
    let mut touched = Vec::new();
    let mut edges = Vec::new();
    for a in 0..n {
        for &k in &entity_keys[a] {
            for &b in &key_entities[k] {
                if b > a {
                    if counts[b] == 0 {
                        touched.push(b);
                    }
                    counts[b] += 1;
                }
            }
        }
        touched.sort_unstable();
        for &b in &touched {
            if counts[b] >= threshold {
                edges.push((a, b));
            }
            counts[b] = 0;
        }
        touched.clear();
    }
    edges
}

/// Global user graph over every user of every market.
pub fn build_user_graph(train: &Dataset, min_common_items: usize) -> Result<InteractionGraph> {
    if min_common_items == 0 {
        return Err(Error::invalid("min_common_items", "must be at least 1"));
    }
    let items = train.items_by_user();
    let users = train.users_by_item();
    let edges = threshold_pairs(&items, &users, min_common_items);
    InteractionGraph::from_edges((0..train.n_users()).collect(), &edges)
}

/// Item graph of one market: nodes are the items that market's users interacted with.
pub fn build_item_graph(train: &Dataset, market: &str, min_common_users: usize) -> Result<InteractionGraph> {
    if min_common_users == 0 {
        return Err(Error::invalid("min_common_users", "must be at least 1"));
    }
    let l = train
        .market_index(market)
        .ok_or_else(|| Error::UnknownMarket(market.to_string()))?;
    let market_users = train.users_in_market(l);
    let mut in_market = vec![false; train.n_items()];
    let mut user_items: Vec<Vec<usize>> = Vec::with_capacity(market_users.len());
    for &u in &market_users {
        let items: Vec<usize> = train.user_interactions(u).iter().map(|it| it.item).collect();
        for &i in &items {
            in_market[i] = true;
        }
        user_items.push(items);
    }
    let node_ids: Vec<usize> = (0..train.n_items()).filter(|&i| in_market[i]).collect();
    let mut local = vec![usize::MAX; train.n_items()];
    for (k, &i) in node_ids.iter().enumerate() {
        local[i] = k;
    }
    // Keys are the market's users (by position in `market_users`).
    let mut item_users = vec![Vec::new(); node_ids.len()];
    for (ku, items) in user_items.iter_mut().enumerate() {
        for i in items.iter_mut() {
            *i = local[*i];
            item_users[*i].push(ku);
        }
    }
    let edges = threshold_pairs(&item_users, &user_items, min_common_users);
    InteractionGraph::from_edges(node_ids, &edges)
}
