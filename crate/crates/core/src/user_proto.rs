//! Market-shared user-behaviour prototypes.
//!
//! Users of all markets are split into modularity communities; the most
//! representative user of each of the `k` largest communities becomes a
//! landmark whose embedding is a prototype. Users are then soft-assigned to
//! prototypes with a student-t kernel, and a sharpened copy of that assignment
//! serves as the self-training target of a KL refinement of the embeddings.

use alloc::vec;
use alloc::vec::Vec;

use crate::gnn::EmbeddingTable;
use crate::graph::InteractionGraph;
use crate::numerics::Tensor2;
use crate::{math, Error, Result};

/// Cosine of the angle between two vectors; 0 when either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = math::norm(a);
    let nb = math::norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommunityPartition {
    /// Community of each local node; indices are contiguous from 0 and
    /// numbered in order of first appearance.
    pub assignment: Vec<usize>,
    pub n_communities: usize,
}

impl CommunityPartition {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map: Vec<Option<usize>> = vec![None; labels.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let assignment = labels
            .iter()
            .map(|&l| {
                *map[l].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self {
            assignment,
            n_communities: next,
        }
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_communities];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

/// Newman modularity of a partition of an unweighted graph.
pub fn modularity(g: &InteractionGraph, partition: &CommunityPartition) -> f64 {
    let two_m = 2.0 * g.edge_count() as f64;
    if two_m == 0.0 {
        return 0.0;
    }
    let mut internal = vec![0.0; partition.n_communities];
    let mut total = vec![0.0; partition.n_communities];
    for v in 0..g.n_nodes() {
        let c = partition.assignment[v];
        total[c] += g.degree(v) as f64;
        internal[c] += g.adjacent(v).iter().filter(|&&u| partition.assignment[u] == c).count() as f64;
    }
    internal
        .iter()
        .zip(&total)
        .map(|(i, t)| i / two_m - (t / two_m) * (t / two_m))
        .sum()
}

/// Weighted graph used between Louvain levels. `adj[i]` holds `(j, A_ij)` with
/// `A_ii` on the diagonal entry, so `k_i = Σ_j A_ij`.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl LevelGraph {
    fn from_graph(g: &InteractionGraph) -> Self {
        Self {
            adj: (0..g.n_nodes()).map(|v| g.adjacent(v).iter().map(|&u| (u, 1.0)).collect()).collect(),
        }
    }

    fn strengths(&self) -> Vec<f64> {
        self.adj.iter().map(|row| row.iter().map(|&(_, w)| w).sum()).collect()
    }

    /// One pass of local moving until stable. Returns labels and whether anything moved.
    fn local_moving(&self) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let k = self.strengths();
        let two_m: f64 = k.iter().sum();
        let mut label: Vec<usize> = (0..n).collect();
        let mut tot = k.clone();
        let mut moved_any = false;
        let mut weight_to = vec![0.0; n];
        let mut seen: Vec<usize> = Vec::new();
        loop {
            let mut moved = false;
            for i in 0..n {
                if k[i] == 0.0 {
                    continue;
                }
                let own = label[i];
                tot[own] -= k[i];
                for &(j, w) in &self.adj[i] {
                    if j == i {
                        continue;
                    }
                    let c = label[j];
                    if weight_to[c] == 0.0 && !seen.contains(&c) {
                        seen.push(c);
                    }
                    weight_to[c] += w;
                }
                let gain = |c: usize, w_to: f64| w_to - k[i] * tot[c] / two_m;
                let mut best = own;
                let mut best_gain = gain(own, weight_to[own]);
                seen.sort_unstable();
                for &c in &seen {
                    let gc = gain(c, weight_to[c]);
                    if gc > best_gain + 1e-12 {
                        best = c;
                        best_gain = gc;
                    }
                }
                for &c in &seen {
                    weight_to[c] = 0.0;
                }
                weight_to[own] = 0.0;
                seen.clear();
                tot[best] += k[i];
                if best != own {
                    label[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        (label, moved_any)
    }

    fn aggregate(&self, partition: &CommunityPartition) -> Self {
        let mut acc: Vec<alloc::collections::BTreeMap<usize, f64>> =
            vec![alloc::collections::BTreeMap::new(); partition.n_communities];
        for (i, row) in self.adj.iter().enumerate() {
            let ci = partition.assignment[i];
            for &(j, w) in row {
                *acc[ci].entry(partition.assignment[j]).or_insert(0.0) += w;
            }
        }
        Self {
            adj: acc.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }
}

/// Multi-level Louvain modularity maximization.
///
/// Nodes are visited in index order and ties favour staying put, then the
/// lower community label, so the result is a deterministic function of the
/// graph. Isolated nodes stay singletons.
pub fn detect_communities(g: &InteractionGraph) -> CommunityPartition {
    let n = g.n_nodes();
    let mut node_comm: Vec<usize> = (0..n).collect();
    if g.edge_count() == 0 {
        return CommunityPartition::from_labels(&node_comm);
    }
    let mut level = LevelGraph::from_graph(g);
    loop {
        let (labels, moved) = level.local_moving();
        if !moved {
            break;
        }
        let part = CommunityPartition::from_labels(&labels);
        for c in node_comm.iter_mut() {
            *c = part.assignment[*c];
        }
        level = level.aggregate(&part);
    }
    CommunityPartition::from_labels(&node_comm)
}

/// Landmark score of every node: `Σ_{j in comm(v), j != v} (A_vj - d_v d_j / 2m) · cos(e_v, e_j)`.
pub fn landmark_scores(g: &InteractionGraph, e: &EmbeddingTable, partition: &CommunityPartition) -> Vec<f64> {
    let n = g.n_nodes();
    let two_m = 2.0 * g.edge_count() as f64;
    let mut scores = vec![0.0; n];
    if two_m == 0.0 {
        return scores;
    }
    let normed = e.normalized();
    let deg = g.degrees();
    for members in partition.members() {
        for &v in &members {
            let adj = g.adjacent(v);
            let mut s = 0.0;
            for &j in &members {
                if j == v {
                    continue;
                }
                let a = if adj.binary_search(&j).is_ok() { 1.0 } else { 0.0 };
                let b = a - (deg[v] * deg[j]) as f64 / two_m;
                s += b * math::dot(normed.row(v), normed.row(j));
            }
            scores[v] = s;
        }
    }
    scores
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserPrototypeSet {
    /// `k x d`, one prototype per row.
    pub prototypes: Tensor2,
    /// Local node index of the landmark behind each prototype.
    pub source_nodes: Vec<usize>,
    /// Student-t degrees of freedom.
    pub alpha: f64,
}

impl UserPrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.rows() == 0
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }
}

/// Picks `k` landmarks: the top-scoring node of each of the `k` largest
/// communities, then (if there are fewer communities) the best remaining nodes
/// overall. Ties go to the smaller node index.
pub fn select_prototypes(
    g: &InteractionGraph,
    e: &EmbeddingTable,
    partition: &CommunityPartition,
    k: usize,
    alpha: f64,
) -> Result<UserPrototypeSet> {
    let n = g.n_nodes();
    if k == 0 || k > n {
        return Err(Error::invalid("k", alloc::format!("need 1 <= k <= {n}, got {k}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha", "must be positive"));
    }
    if e.len() != n {
        return Err(Error::shape(alloc::format!("{} embeddings", e.len()), alloc::format!("{n} nodes")));
    }
    let scores = landmark_scores(g, e, partition);
    let better = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);

    let mut communities = partition.members();
    let mut order: Vec<usize> = (0..communities.len()).collect();
    order.sort_by(|&a, &b| communities[b].len().cmp(&communities[a].len()).then(a.cmp(&b)));
    let mut landmarks = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    for &c in order.iter().take(k) {
        let members = core::mem::take(&mut communities[c]);
        let best = members
            .into_iter()
            .reduce(|a, b| if better(b, a) { b } else { a })
            .expect("communities are nonempty");
        taken[best] = true;
        landmarks.push(best);
    }
    if landmarks.len() < k {
        let mut rest: Vec<usize> = (0..n).filter(|&v| !taken[v]).collect();
        rest.sort_by(|&a, &b| {
            if better(a, b) {
                core::cmp::Ordering::Less
            } else if better(b, a) {
                core::cmp::Ordering::Greater
            } else {
                core::cmp::Ordering::Equal
            }
        });
        landmarks.extend(rest.into_iter().take(k - landmarks.len()));
    }
    let mut prototypes = Tensor2::zeros(k, e.dim());
    for (row, &v) in landmarks.iter().enumerate() {
        prototypes.row_mut(row).copy_from_slice(e.row(v));
    }
    Ok(UserPrototypeSet {
        prototypes,
        source_nodes: landmarks,
        alpha,
    })
}

#[inline]
fn student_t(sq_dist: f64, alpha: f64) -> f64 {
    math::powf(1.0 + sq_dist / alpha, -(alpha + 1.0) / 2.0)
}

/// Student-t soft assignment: row `j` is the normalized kernel between user
/// `j` and every prototype.
pub fn soft_assign(e: &EmbeddingTable, protos: &UserPrototypeSet) -> Result<Tensor2> {
    soft_assign_rows(e.as_tensor(), protos)
}

fn soft_assign_rows(e: &Tensor2, protos: &UserPrototypeSet) -> Result<Tensor2> {
    if e.cols() != protos.prototypes.cols() {
        return Err(Error::shape(
            alloc::format!("embeddings of dim {}", e.cols()),
            alloc::format!("prototypes of dim {}", protos.prototypes.cols()),
        ));
    }
    let k = protos.len();
    let mut w = Tensor2::zeros(e.rows(), k);
    for j in 0..e.rows() {
        let row = w.row_mut(j);
        for (c, out) in row.iter_mut().enumerate() {
            *out = student_t(math::sq_dist(e.row(j), protos.prototype(c)), protos.alpha);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    Ok(w)
}

/// Self-sharpened target: squares each entry, divides by its column mass and
/// renormalizes rows. Columns with zero mass contribute zeros.
pub fn sharpen(w: &Tensor2) -> Tensor2 {
    let (n, k) = w.shape();
    let mut freq = vec![0.0; k];
    for j in 0..n {
        for (f, x) in freq.iter_mut().zip(w.row(j)) {
            *f += x;
        }
    }
    let mut out = Tensor2::zeros(n, k);
    for j in 0..n {
        let row = out.row_mut(j);
        for c in 0..k {
            if freq[c] > 0.0 {
                row[c] = w.get(j, c) * w.get(j, c) / freq[c];
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub w: Tensor2,
    pub w_sharp: Tensor2,
}

impl SoftAssignment {
    pub fn compute(e: &EmbeddingTable, protos: &UserPrototypeSet) -> Result<Self> {
        let w = soft_assign(e, protos)?;
        let w_sharp = sharpen(&w);
        Ok(Self { w, w_sharp })
    }
}

/// `KL(target ‖ model) = Σ target · ln(target / model)`, with `0 · ln 0 = 0`.
pub fn clustering_loss(model: &Tensor2, target: &Tensor2) -> Result<f64> {
    if model.shape() != target.shape() {
        return Err(Error::shape(
            alloc::format!("{}x{}", model.rows(), model.cols()),
            alloc::format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    let mut total = 0.0;
    for j in 0..model.rows() {
        for c in 0..model.cols() {
            let p = target.get(j, c);
            if p == 0.0 {
                continue;
            }
            let q = model.get(j, c);
            if q == 0.0 {
                return Err(Error::SupportViolation { row: j, col: c });
            }
            total += p * math::ln(p / q);
        }
    }
    Ok(total)
}

/// KL loss against a fixed target and its gradient with respect to the user embeddings.
///
/// `∂/∂e_j = (α+1)/α · Σ_k (p_jk - q_jk) (e_j - b_k) / (1 + ‖e_j - b_k‖²/α)`.
pub fn kl_loss_and_grad(e: &Tensor2, protos: &UserPrototypeSet, target: &Tensor2) -> Result<(f64, Tensor2)> {
    let q = soft_assign_rows(e, protos)?;
    let loss = clustering_loss(&q, target)?;
    let alpha = protos.alpha;
    let coef = (alpha + 1.0) / alpha;
    let mut grad = e.zeros_like();
    for j in 0..e.rows() {
        for c in 0..protos.len() {
            let b = protos.prototype(c);
            let d2 = math::sq_dist(e.row(j), b);
            let s = coef * (target.get(j, c) - q.get(j, c)) / (1.0 + d2 / alpha);
            let ej = e.row(j);
            let diff: Vec<f64> = ej.iter().zip(b).map(|(x, y)| x - y).collect();
            for (g, dx) in grad.row_mut(j).iter_mut().zip(diff) {
                *g += s * dx;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub lr: f64,
    /// Steps between recomputations of the sharpened target.
    pub refresh_every: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 0.1,
            refresh_every: 10,
        }
    }
}

/// Gradient descent on the KL objective with frozen prototypes. The target
/// is recomputed from the current embeddings every `refresh_every` steps.
/// Returns the refined embeddings and the loss before each step.
pub fn refine_embeddings(
    e: &EmbeddingTable,
    protos: &UserPrototypeSet,
    config: &RefineConfig,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    let mut x = e.as_tensor().clone();
    let mut trace = Vec::with_capacity(config.steps);
    let refresh = config.refresh_every.max(1);
    let mut target = Tensor2::zeros(0, 0);
    for step in 0..config.steps {
        if step % refresh == 0 {
            target = sharpen(&soft_assign_rows(&x, protos)?);
        }
        let (loss, grad) = kl_loss_and_grad(&x, protos, &target)?;
        trace.push(loss);
        x.axpy(-config.lr, &grad);
    }
    Ok((EmbeddingTable::new(x)?, trace))
}

/// Index of the largest entry of row `user`; ties go to the smaller index.
pub fn assign_prototype(w: &Tensor2, user: usize) -> usize {
    let row = w.row(user);
    let mut best = 0;
    for (c, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = c;
        }
    }
    best
}
