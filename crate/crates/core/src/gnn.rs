//! Sampled mean-aggregation graph encoder.
//!
//! Each layer maps a node to `act(W · [e_v ‖ mean of sampled neighbour embeddings])`.
//! Hidden layers use ReLU, the last layer is linear, and [`encode`] L2-normalizes
//! the final vectors. [`train_unsupervised`] fits the free input embeddings and
//! the layer weights with an edge link-prediction loss over uniform negatives.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::graph::InteractionGraph;
use crate::numerics::{log_sigmoid, relu, relu_grad, sigmoid, Adam, AdamConfig, Optimizer, Parameters, Tensor2};
use crate::rng::{self, Rng};
use crate::{math, Error, Result};

/// Dense per-node vectors, row `i` belonging to local node `i` of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor2,
}

impl EmbeddingTable {
    pub fn new(vectors: Tensor2) -> Result<Self> {
        if vectors.cols() == 0 {
            return Err(Error::invalid("dim", "embedding dimension must be at least 1"));
        }
        if !vectors.is_finite() {
            return Err(Error::invalid("vectors", "embeddings must be finite"));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("vectors", "rows have different lengths"));
        }
        Self::new(Tensor2::new(rows.len(), dim, rows.concat())?)
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn random(n: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut t = Tensor2::zeros(n, dim);
        rng::fill_normal(rng, t.data_mut(), std);
        Self::new(t)
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor2 {
        self.vectors
    }

    /// Copy with every row scaled to unit L2 norm (zero rows stay zero).
    pub fn normalized(&self) -> Self {
        let mut v = self.vectors.clone();
        for r in 0..v.rows() {
            math::normalize(v.row_mut(r));
        }
        Self { vectors: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    /// `d_out x 2·d_in`; the first `d_in` columns act on the node itself.
    pub weight: Tensor2,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageParameters {
    pub layers: Vec<SageLayer>,
    pub sample_size: usize,
}

impl SageParameters {
    /// `n_layers` square layers of width `dim`, Xavier-normal weights,
    /// ReLU on all but the last layer.
    pub fn init(dim: usize, n_layers: usize, sample_size: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / (3 * dim) as f64);
        let layers = (0..n_layers)
            .map(|k| {
                let mut w = Tensor2::zeros(dim, 2 * dim);
                rng::fill_normal(rng, w.data_mut(), std);
                SageLayer {
                    weight: w,
                    activation: if k + 1 == n_layers { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Self { layers, sample_size }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::invalid("sample_size", "must be at least 1"));
        }
        let mut d = input_dim;
        for layer in &self.layers {
            if layer.weight.cols() != 2 * d {
                return Err(Error::shape(
                    alloc::format!("{}x{}", layer.weight.rows(), layer.weight.cols()),
                    alloc::format!("input of width 2x{d}"),
                ));
            }
            d = layer.weight.rows();
        }
        Ok(())
    }
}

/// Elementwise mean; the zero vector of length `dim` when `vectors` is empty.
pub fn aggregate_mean(vectors: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    if vectors.is_empty() {
        return Ok(out);
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::shape(alloc::format!("vector of {}", v.len()), alloc::format!("dim {dim}")));
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Sampled neighbour lists (local indices), one per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods(pub Vec<Vec<usize>>);

impl Neighborhoods {
    /// Up to `sample_size` distinct neighbours per node, uniformly without replacement.
    pub fn sample(g: &InteractionGraph, sample_size: usize, rng: &mut Rng) -> Self {
        let lists = (0..g.n_nodes())
            .map(|v| {
                let adj = g.adjacent(v);
                if adj.len() <= sample_size {
                    adj.to_vec()
                } else {
                    let mut picked: Vec<usize> = index::sample(rng, adj.len(), sample_size)
                        .into_iter()
                        .map(|k| adj[k])
                        .collect();
                    picked.sort_unstable();
                    picked
                }
            })
            .collect();
        Self(lists)
    }

    /// Complete neighbour lists.
    pub fn full(g: &InteractionGraph) -> Self {
        Self((0..g.n_nodes()).map(|v| g.adjacent(v).to_vec()).collect())
    }
}

/// Intermediate values of one layer kept for the backward pass.
struct LayerCache {
    /// `[x_v ‖ mean]` per node, `n x 2·d_in`.
    concat: Tensor2,
    /// Pre-activation, `n x d_out`.
    pre: Tensor2,
}

fn layer_forward(x: &Tensor2, weight: &Tensor2, act: Activation, nbrs: &Neighborhoods) -> (Tensor2, LayerCache) {
    let (n, d_in) = x.shape();
    let d_out = weight.rows();
    let mut concat = Tensor2::zeros(n, 2 * d_in);
    for v in 0..n {
        let row = concat.row_mut(v);
        row[..d_in].copy_from_slice(x.row(v));
        let list = &nbrs.0[v];
        if !list.is_empty() {
            let inv = 1.0 / list.len() as f64;
            for &u in list {
                for (o, val) in row[d_in..].iter_mut().zip(x.row(u)) {
                    *o += val * inv;
                }
            }
        }
    }
    let mut pre = Tensor2::zeros(n, d_out);
    for v in 0..n {
        let h = concat.row(v);
        for (o, r) in pre.row_mut(v).iter_mut().zip(0..d_out) {
            *o = math::dot(weight.row(r), h);
        }
    }
    let out = pre.map(|a| act.apply(a));
    (out, LayerCache { concat, pre })
}

/// Returns `dX` and accumulates `dW`.
fn layer_backward(
    d_out: &Tensor2,
    cache: &LayerCache,
    weight: &Tensor2,
    act: Activation,
    nbrs: &Neighborhoods,
    d_weight: &mut Tensor2,
) -> Tensor2 {
    let n = d_out.rows();
    let d_in = weight.cols() / 2;
    let mut dx = Tensor2::zeros(n, d_in);
    let mut d_pre = vec![0.0; weight.rows()];
    for v in 0..n {
        for ((dp, &g), &a) in d_pre.iter_mut().zip(d_out.row(v)).zip(cache.pre.row(v)) {
            *dp = g * act.grad(a);
        }
        if d_pre.iter().all(|&g| g == 0.0) {
            continue;
        }
        d_weight
            .add_outer(&d_pre, cache.concat.row(v), 1.0)
            .expect("shapes fixed by forward");
        let dh = weight.matvec_t(&d_pre).expect("shapes fixed by forward");
        for (o, g) in dx.row_mut(v).iter_mut().zip(&dh[..d_in]) {
            *o += g;
        }
        let list = &nbrs.0[v];
        if !list.is_empty() {
            let inv = 1.0 / list.len() as f64;
            for &u in list {
                for (o, g) in dx.row_mut(u).iter_mut().zip(&dh[d_in..]) {
                    *o += g * inv;
                }
            }
        }
    }
    dx
}

/// One aggregation layer with freshly sampled neighbourhoods.
pub fn sage_layer(
    g: &InteractionGraph,
    e: &EmbeddingTable,
    layer: &SageLayer,
    sample_size: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable> {
    if e.len() != g.n_nodes() {
        return Err(Error::shape(alloc::format!("{} embeddings", e.len()), alloc::format!("{} nodes", g.n_nodes())));
    }
    if layer.weight.cols() != 2 * e.dim() {
        return Err(Error::shape(
            alloc::format!("{}x{}", layer.weight.rows(), layer.weight.cols()),
            alloc::format!("input of width 2x{}", e.dim()),
        ));
    }
    if sample_size == 0 {
        return Err(Error::invalid("sample_size", "must be at least 1"));
    }
    let nbrs = Neighborhoods::sample(g, sample_size, rng);
    let (out, _) = layer_forward(e.as_tensor(), &layer.weight, layer.activation, &nbrs);
    EmbeddingTable::new(out)
}

/// All layers in sequence, then row-wise L2 normalization.
pub fn encode(g: &InteractionGraph, e0: &EmbeddingTable, params: &SageParameters, rng: &mut Rng) -> Result<EmbeddingTable> {
    if e0.len() != g.n_nodes() {
        return Err(Error::shape(alloc::format!("{} embeddings", e0.len()), alloc::format!("{} nodes", g.n_nodes())));
    }
    params.validate(e0.dim())?;
    let mut e = e0.clone();
    for layer in &params.layers {
        e = sage_layer(g, &e, layer, params.sample_size, rng)?;
    }
    Ok(e.normalized())
}

/// Trainable state of the encoder: free input embeddings plus layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SageModel {
    pub input: Tensor2,
    pub weights: Vec<Tensor2>,
}

impl Parameters for SageModel {
    fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = vec![&self.input];
        v.extend(self.weights.iter());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = vec![&mut self.input];
        v.extend(self.weights.iter_mut());
        v
    }
}

impl SageModel {
    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.weights.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input: self.input.zeros_like(),
            weights: self.weights.iter().map(Tensor2::zeros_like).collect(),
        }
    }

    /// Un-normalized outputs of the last layer.
    pub fn forward(&self, nbrs: &[Neighborhoods]) -> Tensor2 {
        let mut x = self.input.clone();
        for (k, w) in self.weights.iter().enumerate() {
            x = layer_forward(&x, w, self.activation(k), &nbrs[k]).0;
        }
        x
    }

    /// Mean link-prediction loss over `pairs`, each with its own negatives, and its gradient.
    ///
    /// Per pair: `-ln σ(z_u·z_v) - Σ_n ln σ(-z_u·z_n)`, on the un-normalized outputs.
    pub fn link_loss(&self, nbrs: &[Neighborhoods], pairs: &[(usize, usize)], negatives: &[Vec<usize>]) -> (f64, Self) {
        let mut caches = Vec::with_capacity(self.weights.len());
        let mut x = self.input.clone();
        for (k, w) in self.weights.iter().enumerate() {
            let (out, cache) = layer_forward(&x, w, self.activation(k), &nbrs[k]);
            caches.push(cache);
            x = out;
        }
        let z = x;
        let scale = 1.0 / pairs.len().max(1) as f64;
        let mut loss = 0.0;
        let mut dz = z.zeros_like();
        for (&(u, v), negs) in pairs.iter().zip(negatives) {
            let s = math::dot(z.row(u), z.row(v));
            loss -= log_sigmoid(s);
            let c = (sigmoid(s) - 1.0) * scale;
            add_scaled(&mut dz, u, z.row(v), c);
            add_scaled(&mut dz, v, z.row(u), c);
            for &n in negs {
                let s = math::dot(z.row(u), z.row(n));
                loss -= log_sigmoid(-s);
                let c = sigmoid(s) * scale;
                add_scaled(&mut dz, u, z.row(n), c);
                add_scaled(&mut dz, n, z.row(u), c);
            }
        }
        let mut grads = self.zeros_like();
        let mut d = dz;
        for k in (0..self.weights.len()).rev() {
            d = layer_backward(&d, &caches[k], &self.weights[k], self.activation(k), &nbrs[k], &mut grads.weights[k]);
        }
        grads.input = d;
        (loss * scale, grads)
    }
}

fn add_scaled(t: &mut Tensor2, row: usize, v: &[f64], c: f64) {
    for (o, x) in t.row_mut(row).iter_mut().zip(v) {
        *o += c * x;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SageConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub sample_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub neg_per_pos: usize,
    /// Edges per optimization step.
    pub batch_edges: usize,
    pub init_std: f64,
    /// Adam when true, plain gradient descent otherwise.
    pub adam: bool,
}

impl Default for SageConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_layers: 2,
            sample_size: 10,
            epochs: 20,
            lr: 0.01,
            neg_per_pos: 5,
            batch_edges: 4096,
            init_std: 0.1,
            adam: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEmbedding {
    /// Normalized node embeddings (local node order).
    pub embeddings: EmbeddingTable,
    pub input: EmbeddingTable,
    pub params: SageParameters,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Set when the graph had no edges and the embeddings are untrained.
    pub untrained: bool,
}

/// Fits the encoder on `g` and returns the encoded, normalized embeddings.
pub fn train_unsupervised(g: &InteractionGraph, config: &SageConfig, seed: u64) -> Result<TrainedEmbedding> {
    if config.dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    if config.sample_size == 0 {
        return Err(Error::invalid("sample_size", "must be at least 1"));
    }
    let mut r = rng::seeded(seed);
    let n = g.n_nodes();
    let input = EmbeddingTable::random(n, config.dim, config.init_std, &mut r)?;
    let params = SageParameters::init(config.dim, config.n_layers, config.sample_size, &mut r);
    if g.edge_count() == 0 {
        return Ok(TrainedEmbedding {
            embeddings: input.normalized(),
            input,
            params,
            loss_trace: Vec::new(),
            untrained: true,
        });
    }
    let mut model = SageModel {
        input: input.into_tensor(),
        weights: params.layers.iter().map(|l| l.weight.clone()).collect(),
    };
    let mut opt = if config.adam {
        Optimizer::Adam(Adam::for_model(AdamConfig::with_lr(config.lr), &model))
    } else {
        Optimizer::Sgd { lr: config.lr }
    };
    let mut edges: Vec<(usize, usize)> = g.edges().collect();
    let batch = config.batch_edges.max(1);
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        shuffle(&mut edges, &mut r);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in edges.chunks(batch) {
            let nbrs: Vec<Neighborhoods> = (0..model.weights.len())
                .map(|_| Neighborhoods::sample(g, config.sample_size, &mut r))
                .collect();
            let negatives: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&(u, _)| (0..config.neg_per_pos).map(|_| draw_other(n, u, &mut r)).collect())
                .collect();
            let (loss, grads) = model.link_loss(&nbrs, chunk, &negatives);
            opt.step_model(&mut model, &grads)?;
            epoch_loss += loss;
            steps += 1;
        }
        trace.push(epoch_loss / steps as f64);
    }
    let input = EmbeddingTable::new(model.input)?;
    let params = SageParameters {
        layers: model
            .weights
            .into_iter()
            .zip(params.layers)
            .map(|(weight, l)| SageLayer {
                weight,
                activation: l.activation,
            })
            .collect(),
        sample_size: config.sample_size,
    };
    let embeddings = encode(g, &input, &params, &mut r)?;
    Ok(TrainedEmbedding {
        embeddings,
        input,
        params,
        loss_trace: trace,
        untrained: false,
    })
}

fn draw_other(n: usize, avoid: usize, r: &mut Rng) -> usize {
    if n < 2 {
        return avoid;
    }
    loop {
        let k = r.random_range(0..n);
        if k != avoid {
            return k;
        }
    }
}

pub(crate) fn shuffle<T>(v: &mut [T], r: &mut Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(r);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::graph;
    use crate::numerics::finite_diff_check;

    fn table(rows: &[&[f64]]) -> EmbeddingTable {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingTable::from_rows(&rows).unwrap()
    }

    fn linear_layer(weight: Tensor2) -> SageLayer {
        SageLayer {
            weight,
            activation: Activation::Identity,
        }
    }

    fn random_tensor(r: usize, c: usize, seed: u64) -> Tensor2 {
        let mut t = Tensor2::zeros(r, c);
        rng::fill_normal(&mut rng::seeded(seed), t.data_mut(), 1.0);
        t
    }

    /// Dense reference: mean over the full adjacency row, no sampling.
    fn dense_layer(g: &InteractionGraph, e: &Tensor2, layer: &SageLayer) -> Tensor2 {
        let (n, d) = e.shape();
        let mut out = Tensor2::zeros(n, layer.weight.rows());
        for v in 0..n {
            let mut h = vec![0.0; 2 * d];
            h[..d].copy_from_slice(e.row(v));
            let deg: Vec<usize> = (0..n).filter(|&u| g.has_edge(v, u)).collect();
            for &u in &deg {
                for c in 0..d {
                    h[d + c] += e.get(u, c) / deg.len() as f64;
                }
            }
            for r in 0..layer.weight.rows() {
                let mut s = 0.0;
                for c in 0..2 * d {
                    s += layer.weight.get(r, c) * h[c];
                }
                out.set(v, r, layer.activation.apply(s));
            }
        }
        out
    }

    #[test]
    fn mean_aggregation() {
        assert_eq!(aggregate_mean(&[&[1.0, 0.0], &[0.0, 1.0]], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(aggregate_mean(&[], 3).unwrap(), vec![0.0; 3]);
        assert!(aggregate_mean(&[&[1.0], &[1.0, 2.0]], 1).is_err());
        let t = random_tensor(5, 4, 3);
        let rows: Vec<&[f64]> = (0..5).map(|i| t.row(i)).collect();
        let m = aggregate_mean(&rows, 4).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for i in 0..5 {
                s += t.get(i, c);
            }
            assert!((m[c] - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let g = graph(1, &[]);
        let e = table(&[&[1.0, 2.0]]);
        let w = Tensor2::new(2, 4, vec![1.0, 0.0, 5.0, 5.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let out = sage_layer(&g, &e, &linear_layer(w), 3, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn single_edge_neighbourhood_is_the_other_node() {
        let g = graph(2, &[(0, 1)]);
        let e = table(&[&[1.0, 2.0], &[3.0, 4.0]]);
        // W picks out the neighbourhood half.
        let w = Tensor2::new(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = sage_layer(&g, &e, &linear_layer(w), 1, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn full_sampling_matches_dense_oracle() {
        let g = graph(6, &[(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5), (1, 5)]);
        let e = EmbeddingTable::new(random_tensor(6, 3, 1)).unwrap();
        for act in [Activation::Relu, Activation::Identity] {
            let layer = SageLayer {
                weight: random_tensor(4, 6, 2),
                activation: act,
            };
            let out = sage_layer(&g, &e, &layer, g.max_degree(), &mut rng::seeded(5)).unwrap();
            let oracle = dense_layer(&g, e.as_tensor(), &layer);
            for (a, b) in out.as_tensor().data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = graph(2, &[(0, 1)]);
        let e = table(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let bad = linear_layer(Tensor2::zeros(2, 3));
        assert!(matches!(sage_layer(&g, &e, &bad, 1, &mut rng::seeded(0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn encode_without_layers_normalizes() {
        let g = graph(2, &[(0, 1)]);
        let e = table(&[&[3.0, 4.0], &[0.0, 2.0]]);
        let params = SageParameters {
            layers: vec![],
            sample_size: 1,
        };
        let out = encode(&g, &e, &params, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.row(0), &[0.6, 0.8]);
        assert_eq!(out.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn encode_is_repeatable_and_unit_norm() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let mut r = rng::seeded(3);
        let e0 = EmbeddingTable::random(3, 4, 0.5, &mut r).unwrap();
        let params = SageParameters::init(4, 2, 1, &mut r);
        let a = encode(&g, &e0, &params, &mut rng::seeded(10)).unwrap();
        let b = encode(&g, &e0, &params, &mut rng::seeded(10)).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            assert!((math::norm(a.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_neighbourhood_layer_is_permutation_equivariant() {
        let g = graph(6, &[(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let perm = [3usize, 5, 0, 1, 4, 2];
        let pg = g.relabel(&perm).unwrap();
        let e = random_tensor(6, 3, 8);
        let mut pe = Tensor2::zeros(6, 3);
        for v in 0..6 {
            pe.row_mut(perm[v]).copy_from_slice(e.row(v));
        }
        let layer = SageLayer {
            weight: random_tensor(3, 6, 9),
            activation: Activation::Relu,
        };
        let s = g.max_degree();
        let out = sage_layer(&g, &EmbeddingTable::new(e).unwrap(), &layer, s, &mut rng::seeded(0)).unwrap();
        let pout = sage_layer(&pg, &EmbeddingTable::new(pe).unwrap(), &layer, s, &mut rng::seeded(1)).unwrap();
        for v in 0..6 {
            for (a, b) in out.row(v).iter().zip(pout.row(perm[v])) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn link_loss_gradient_matches_finite_differences() {
        let g = graph(7, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 6), (2, 3)]);
        let mut r = rng::seeded(21);
        let model = SageModel {
            input: {
                let mut t = Tensor2::zeros(7, 3);
                rng::fill_normal(&mut r, t.data_mut(), 0.7);
                t
            },
            weights: SageParameters::init(3, 2, 2, &mut r).layers.into_iter().map(|l| l.weight).collect(),
        };
        let nbrs: Vec<Neighborhoods> = (0..2).map(|_| Neighborhoods::sample(&g, 2, &mut r)).collect();
        let pairs: Vec<(usize, usize)> = g.edges().collect();
        let negatives: Vec<Vec<usize>> = pairs.iter().map(|&(u, _)| vec![(u + 3) % 7, (u + 5) % 7]).collect();
        let (_, grads) = model.link_loss(&nbrs, &pairs, &negatives);
        let x = model.flatten();
        let err = finite_diff_check(
            |p| {
                let mut m = model.clone();
                m.load_flat(p);
                m.link_loss(&nbrs, &pairs, &negatives).0
            },
            &x,
            &grads.flatten(),
            1e-5,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn training_separates_two_cliques() {
        let mut edges = Vec::new();
        for base in [0usize, 5] {
            for a in 0..5 {
                for b in a + 1..5 {
                    edges.push((base + a, base + b));
                }
            }
        }
        let g = graph(10, &edges);
        let cfg = SageConfig {
            dim: 8,
            epochs: 60,
            neg_per_pos: 3,
            batch_edges: 8,
            ..SageConfig::default()
        };
        let t = train_unsupervised(&g, &cfg, 4).unwrap();
        let e = &t.embeddings;
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0.0, 0.0, 0.0);
        for a in 0..10 {
            for b in a + 1..10 {
                let c = math::dot(e.row(a), e.row(b));
                if (a < 5) == (b < 5) {
                    intra += c;
                    ni += 1.0;
                } else {
                    inter += c;
                    nx += 1.0;
                }
            }
        }
        assert!(intra / ni > inter / nx, "intra {} inter {}", intra / ni, inter / nx);
        assert!(t.loss_trace[4] <= t.loss_trace[0]);
        for i in 0..10 {
            assert!((math::norm(e.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_edge_becomes_likely() {
        let g = graph(2, &[(0, 1)]);
        let cfg = SageConfig {
            dim: 4,
            epochs: 50,
            neg_per_pos: 1,
            ..SageConfig::default()
        };
        let t = train_unsupervised(&g, &cfg, 1).unwrap();
        let mut r = rng::seeded(0);
        let model = SageModel {
            input: t.input.as_tensor().clone(),
            weights: t.params.layers.iter().map(|l| l.weight.clone()).collect(),
        };
        let nbrs: Vec<Neighborhoods> = (0..2).map(|_| Neighborhoods::sample(&g, 10, &mut r)).collect();
        let z = model.forward(&nbrs);
        assert!(sigmoid(math::dot(z.row(0), z.row(1))) > 0.5);
    }

    #[test]
    fn edgeless_graph_is_flagged() {
        let g = graph(3, &[]);
        let t = train_unsupervised(&g, &SageConfig::default(), 0).unwrap();
        assert!(t.untrained);
        for i in 0..3 {
            assert!((math::norm(t.embeddings.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        let cfg = SageConfig {
            dim: 4,
            epochs: 3,
            ..SageConfig::default()
        };
        assert_eq!(train_unsupervised(&g, &cfg, 7).unwrap(), train_unsupervised(&g, &cfg, 7).unwrap());
    }
}
