//! Recommendation heads: GMF, MLP and their fusion NMF, each in a plain
//! form, a prototype-gated form and a market-aware form.
//!
//! Prototype gating multiplies the user side by the user's behaviour
//! prototype `b` and the item side by the market prototype `o`. A disabled
//! side uses the all-ones vector, so a gated head with both sides disabled is
//! exactly the plain head. Gradients are derived by hand and checked against
//! finite differences in the tests.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use rand::Rng as _;

use crate::data::Dataset;
use crate::gnn::shuffle;
use crate::numerics::{bce_loss, relu, relu_grad, sigmoid, sigmoid_clamped, Adam, AdamConfig, Parameters, Tensor2};
use crate::rng;
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backbone {
    Gmf,
    Mlp,
    Nmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// No prototypes.
    Base,
    /// Prototype-gated.
    Dgre,
    /// Market-aware: a learned market vector (GMF) or a one-hot market input (MLP).
    Ma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadKind {
    pub backbone: Backbone,
    pub variant: Variant,
}

impl HeadKind {
    pub const fn new(backbone: Backbone, variant: Variant) -> Self {
        Self { backbone, variant }
    }

    pub fn all() -> Vec<HeadKind> {
        let mut out = Vec::new();
        for backbone in [Backbone::Gmf, Backbone::Mlp, Backbone::Nmf] {
            for variant in [Variant::Base, Variant::Dgre, Variant::Ma] {
                out.push(HeadKind::new(backbone, variant));
            }
        }
        out
    }

    fn has_gmf(&self) -> bool {
        self.backbone != Backbone::Mlp
    }

    fn has_mlp(&self) -> bool {
        self.backbone != Backbone::Gmf
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gmf => "gmf",
            Backbone::Mlp => "mlp",
            Backbone::Nmf => "nmf",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Dgre => "dgre",
            Variant::Ma => "ma",
        })
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.backbone, self.variant)
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    /// Accepts `gmf`, `gmf-dgre`, `dgre-gmf`, `ma-mlp`, ... (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let bad = || Error::invalid("head", alloc::format!("unknown head kind `{s}`"));
        let backbone = |t: &str| match t {
            "gmf" => Some(Backbone::Gmf),
            "mlp" => Some(Backbone::Mlp),
            "nmf" | "neumf" => Some(Backbone::Nmf),
            _ => None,
        };
        let variant = |t: &str| match t {
            "base" => Some(Variant::Base),
            "dgre" => Some(Variant::Dgre),
            "ma" => Some(Variant::Ma),
            _ => None,
        };
        let parts: Vec<&str> = lower.split('-').collect();
        match parts.as_slice() {
            [b] => backbone(b).map(|b| HeadKind::new(b, Variant::Base)).ok_or_else(bad),
            [a, b] => match (backbone(a), variant(b), variant(a), backbone(b)) {
                (Some(bb), Some(v), _, _) | (_, _, Some(v), Some(bb)) => Ok(HeadKind::new(bb, v)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Per-user behaviour prototypes and per-market prototypes, already in head space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeContext {
    /// `n_users x d`: the prototype `b` used for each user.
    pub user_vectors: Tensor2,
    /// `n_markets x d`.
    pub market_vectors: Tensor2,
    pub user_market: Vec<usize>,
    pub shared_enabled: bool,
    pub market_enabled: bool,
    ones: Vec<f64>,
}

impl PrototypeContext {
    pub fn new(
        user_vectors: Tensor2,
        market_vectors: Tensor2,
        user_market: Vec<usize>,
        shared_enabled: bool,
        market_enabled: bool,
    ) -> Result<Self> {
        let d = user_vectors.cols();
        if market_vectors.cols() != d {
            return Err(Error::shape(
                alloc::format!("user prototypes of dim {d}"),
                alloc::format!("market prototypes of dim {}", market_vectors.cols()),
            ));
        }
        if user_vectors.rows() != user_market.len() {
            return Err(Error::shape(
                alloc::format!("{} user prototype rows", user_vectors.rows()),
                alloc::format!("{} users", user_market.len()),
            ));
        }
        if let Some(&m) = user_market.iter().find(|&&m| m >= market_vectors.rows()) {
            return Err(Error::UnknownId { kind: "market", id: m as u64 });
        }
        Ok(Self {
            user_vectors,
            market_vectors,
            user_market,
            shared_enabled,
            market_enabled,
            ones: vec![1.0; d],
        })
    }

    /// Both sides off; the prototype tables are all ones.
    pub fn disabled(dim: usize, user_market: Vec<usize>, n_markets: usize) -> Self {
        let n = user_market.len();
        Self::new(Tensor2::filled(n, dim, 1.0), Tensor2::filled(n_markets, dim, 1.0), user_market, false, false)
            .expect("consistent shapes")
    }

    pub fn with_flags(&self, shared_enabled: bool, market_enabled: bool) -> Self {
        Self {
            shared_enabled,
            market_enabled,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.ones.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_market.len()
    }

    pub fn n_markets(&self) -> usize {
        self.market_vectors.rows()
    }

    pub fn market_of(&self, user: usize) -> usize {
        self.user_market[user]
    }

    pub fn ones(&self) -> &[f64] {
        &self.ones
    }

    /// `b_K(u)`, or ones when the shared side is off.
    pub fn b(&self, user: usize) -> &[f64] {
        if self.shared_enabled {
            self.user_vectors.row(user)
        } else {
            &self.ones
        }
    }

    /// `o_l`, or ones when the market side is off.
    pub fn o(&self, market: usize) -> &[f64] {
        if self.market_enabled {
            self.market_vectors.row(market)
        } else {
            &self.ones
        }
    }
}

/// How each user's behaviour prototype is chosen from the soft assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharedChoice {
    /// The argmax prototype (ties to the smaller index).
    #[default]
    Argmax,
    /// `Σ_k W(u,k) b_k`.
    SoftMixture,
}

/// Per-user prototype vectors from a `k x d` prototype table and an `n x k` assignment.
pub fn resolve_user_prototypes(prototypes: &Tensor2, w: &Tensor2, choice: SharedChoice) -> Result<Tensor2> {
    if w.cols() != prototypes.rows() {
        return Err(Error::shape(
            alloc::format!("assignment with {} columns", w.cols()),
            alloc::format!("{} prototypes", prototypes.rows()),
        ));
    }
    match choice {
        SharedChoice::Argmax => {
            let mut out = Tensor2::zeros(w.rows(), prototypes.cols());
            for u in 0..w.rows() {
                let k = crate::user_proto::assign_prototype(w, u);
                out.row_mut(u).copy_from_slice(prototypes.row(k));
            }
            Ok(out)
        }
        SharedChoice::SoftMixture => w.matmul(prototypes),
    }
}

/// Fully connected layer `W x + b`, `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor2,
    /// `1 x out`.
    pub b: Tensor2,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor2::zeros(output, input),
            b: Tensor2::zeros(1, output),
        }
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    pub fn output(&self) -> usize {
        self.w.rows()
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output())
            .map(|r| math::dot(self.w.row(r), x) + self.b.data()[r])
            .collect()
    }
}

/// User and item tables of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub p: Tensor2,
    pub q: Tensor2,
}

fn check_dims(what: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(alloc::format!("{what} of dim {got}"), alloc::format!("dim {want}")));
    }
    Ok(())
}

/// `(p ⊙ b) ⊙ (o ⊙ q)`.
fn gmf_vector(p: &[f64], q: &[f64], b: &[f64], o: &[f64]) -> Vec<f64> {
    (0..p.len()).map(|c| (p[c] * b[c]) * (o[c] * q[c])).collect()
}

/// `[p ⊙ b ; o ⊙ q]`, then the one-hot market block if any.
fn mlp_input(p: &[f64], q: &[f64], b: &[f64], o: &[f64], onehot: Option<(usize, usize)>) -> Vec<f64> {
    let mut m0 = Vec::with_capacity(2 * p.len() + onehot.map_or(0, |(_, n)| n));
    m0.extend(p.iter().zip(b).map(|(x, y)| x * y));
    m0.extend(o.iter().zip(q).map(|(x, y)| x * y));
    if let Some((market, n)) = onehot {
        m0.extend((0..n).map(|l| if l == market { 1.0 } else { 0.0 }));
    }
    m0
}

/// Runs the ReLU tower; returns each layer's input and pre-activation plus the output.
fn mlp_tower(m0: Vec<f64>, layers: &[Dense]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut m = m0;
    for layer in layers {
        let a = layer.pre_activation(&m);
        let next = a.iter().map(|&x| relu(x)).collect();
        inputs.push(m);
        pre.push(a);
        m = next;
    }
    (inputs, pre, m)
}

fn check_tower(layers: &[Dense], input: usize) -> Result<usize> {
    let mut width = input;
    for layer in layers {
        check_dims("layer input", layer.input(), width)?;
        width = layer.output();
    }
    Ok(width)
}

/// `σ(hᵀ((p ⊙ b) ⊙ (o ⊙ q)))`.
pub fn gmf_forward(p: &[f64], q: &[f64], b: &[f64], o: &[f64], h: &[f64]) -> Result<f64> {
    let d = p.len();
    for (name, v) in [("q", q), ("b", b), ("o", o), ("h", h)] {
        check_dims(name, v.len(), d)?;
    }
    Ok(sigmoid_clamped(math::dot(h, &gmf_vector(p, q, b, o))))
}

/// `σ(hᵀ m_L)` with `m_0 = [p ⊙ b ; o ⊙ q]` and ReLU layers.
pub fn mlp_forward(p: &[f64], q: &[f64], b: &[f64], o: &[f64], layers: &[Dense], h: &[f64]) -> Result<f64> {
    let d = p.len();
    for (name, v) in [("q", q), ("b", b), ("o", o)] {
        check_dims(name, v.len(), d)?;
    }
    let out = check_tower(layers, 2 * d)?;
    check_dims("h", h.len(), out)?;
    let (_, _, m) = mlp_tower(mlp_input(p, q, b, o, None), layers);
    Ok(sigmoid_clamped(math::dot(h, &m)))
}

/// `σ(hᵀ [m_GMF ‖ m_MLP])`.
#[allow(clippy::too_many_arguments)]
pub fn nmf_forward(
    p_gmf: &[f64],
    q_gmf: &[f64],
    p_mlp: &[f64],
    q_mlp: &[f64],
    b: &[f64],
    o: &[f64],
    layers: &[Dense],
    h: &[f64],
) -> Result<f64> {
    let d = p_gmf.len();
    for (name, v) in [("q_gmf", q_gmf), ("p_mlp", p_mlp), ("q_mlp", q_mlp), ("b", b), ("o", o)] {
        check_dims(name, v.len(), d)?;
    }
    let out = check_tower(layers, 2 * d)?;
    check_dims("h", h.len(), d + out)?;
    let g = gmf_vector(p_gmf, q_gmf, b, o);
    let (_, _, m) = mlp_tower(mlp_input(p_mlp, q_mlp, b, o, None), layers);
    Ok(sigmoid_clamped(math::dot(&h[..d], &g) + math::dot(&h[d..], &m)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub dim: usize,
    /// Tower widths in the usual NCF notation: the first entry is the input
    /// width (`2 * dim`), each following entry one ReLU layer's output.
    pub mlp_layers: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub neg_per_pos: usize,
    pub init_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            mlp_layers: vec![32, 16, 8],
            epochs: 20,
            lr: 1e-3,
            batch_size: 256,
            neg_per_pos: 4,
            init_std: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if self.mlp_layers.len() < 2 || self.mlp_layers[0] != 2 * self.dim {
            return Err(Error::invalid(
                "mlp_layers",
                alloc::format!("need at least two widths starting with 2 * dim = {}", 2 * self.dim),
            ));
        }
        if self.mlp_layers.contains(&0) {
            return Err(Error::invalid("mlp_layers", "widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        Ok(())
    }
}

/// Trainable tensors of a head. Which fields are present depends on the kind.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub kind: HeadKind,
    pub gmf: Option<Factors>,
    pub mlp: Option<Factors>,
    pub layers: Vec<Dense>,
    /// Learned per-market vectors of the market-aware GMF branch.
    pub market: Option<Tensor2>,
    /// `1 x width`; GMF part first for NMF.
    pub h: Tensor2,
    pub n_markets: usize,
}

impl Parameters for HeadParameters {
    fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = Vec::new();
        for f in self.gmf.iter().chain(self.mlp.iter()) {
            v.push(&f.p);
            v.push(&f.q);
        }
        for l in &self.layers {
            v.push(&l.w);
            v.push(&l.b);
        }
        v.extend(self.market.iter());
        v.push(&self.h);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = Vec::new();
        for f in self.gmf.iter_mut().chain(self.mlp.iter_mut()) {
            v.push(&mut f.p);
            v.push(&mut f.q);
        }
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.extend(self.market.iter_mut());
        v.push(&mut self.h);
        v
    }
}

struct Cache {
    z: f64,
    gmf: Option<GmfCache>,
    mlp: Option<MlpCache>,
}

struct GmfCache {
    pb: Vec<f64>,
    oq: Vec<f64>,
    x: Vec<f64>,
    out: Vec<f64>,
}

struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

/// One labelled training pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

impl HeadParameters {
    /// Gaussian embeddings, He-initialized tower, `h` of ones on the GMF part.
    pub fn init(
        kind: HeadKind,
        n_users: usize,
        n_items: usize,
        n_markets: usize,
        config: &HeadConfig,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut table = |rows: usize| {
            let mut t = Tensor2::zeros(rows, d);
            rng::fill_normal(rng, t.data_mut(), config.init_std);
            t
        };
        let mut factors = || Factors {
            p: table(n_users),
            q: table(n_items),
        };
        let gmf = kind.has_gmf().then(&mut factors);
        let mlp = kind.has_mlp().then(&mut factors);
        let mut layers = Vec::new();
        let mut h = Vec::new();
        if kind.has_gmf() {
            h.extend(core::iter::repeat_n(1.0, d));
        }
        if kind.has_mlp() {
            let onehot = if kind.variant == Variant::Ma { n_markets } else { 0 };
            for (i, pair) in config.mlp_layers.windows(2).enumerate() {
                let input = pair[0] + if i == 0 { onehot } else { 0 };
                let mut layer = Dense::zeros(input, pair[1]);
                rng::fill_normal(rng, layer.w.data_mut(), math::sqrt(2.0 / input as f64));
                layers.push(layer);
            }
            let last = *config.mlp_layers.last().expect("validated");
            let mut hm = vec![0.0; last];
            rng::fill_normal(rng, &mut hm, math::sqrt(1.0 / last as f64));
            h.extend(hm);
        }
        let market = (kind.has_gmf() && kind.variant == Variant::Ma).then(|| Tensor2::filled(n_markets, d, 1.0));
        Ok(Self {
            kind,
            gmf,
            mlp,
            layers,
            market,
            h: Tensor2::new(1, h.len(), h)?,
            n_markets,
        })
    }

    /// NMF whose branches start from separately trained GMF and MLP heads of
    /// the same variant; `h` is the half-weighted concatenation of theirs.
    pub fn nmf_from_pretrained(gmf: &HeadParameters, mlp: &HeadParameters) -> Result<Self> {
        if gmf.kind.backbone != Backbone::Gmf || mlp.kind.backbone != Backbone::Mlp {
            return Err(Error::invalid("pretrained", "need one GMF and one MLP head"));
        }
        if gmf.kind.variant != mlp.kind.variant {
            return Err(Error::invalid("pretrained", "branches were trained as different variants"));
        }
        let h: Vec<f64> = gmf.h.data().iter().chain(mlp.h.data()).map(|x| 0.5 * x).collect();
        Ok(Self {
            kind: HeadKind::new(Backbone::Nmf, gmf.kind.variant),
            gmf: gmf.gmf.clone(),
            mlp: mlp.mlp.clone(),
            layers: mlp.layers.clone(),
            market: gmf.market.clone(),
            h: Tensor2::new(1, h.len(), h)?,
            n_markets: gmf.n_markets,
        })
    }

    pub fn dim(&self) -> usize {
        self.gmf.as_ref().or(self.mlp.as_ref()).map_or(0, |f| f.p.cols())
    }

    pub fn n_users(&self) -> usize {
        self.gmf.as_ref().or(self.mlp.as_ref()).map_or(0, |f| f.p.rows())
    }

    pub fn n_items(&self) -> usize {
        self.gmf.as_ref().or(self.mlp.as_ref()).map_or(0, |f| f.q.rows())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn gates<'a>(&self, ctx: &'a PrototypeContext, user: usize) -> (&'a [f64], &'a [f64]) {
        if self.kind.variant == Variant::Dgre {
            (ctx.b(user), ctx.o(ctx.market_of(user)))
        } else {
            (ctx.ones(), ctx.ones())
        }
    }

    fn forward(&self, ctx: &PrototypeContext, user: usize, item: usize) -> Cache {
        let (b, o) = self.gates(ctx, user);
        let market = ctx.market_of(user);
        let d = self.dim();
        let h = self.h.data();
        let mut z = 0.0;
        let gmf = self.gmf.as_ref().map(|f| {
            let (p, q) = (f.p.row(user), f.q.row(item));
            let pb: Vec<f64> = p.iter().zip(b).map(|(x, y)| x * y).collect();
            let oq: Vec<f64> = o.iter().zip(q).map(|(x, y)| x * y).collect();
            let x: Vec<f64> = pb.iter().zip(&oq).map(|(a, c)| a * c).collect();
            let out = match &self.market {
                Some(a) => x.iter().zip(a.row(market)).map(|(v, s)| v * s).collect(),
                None => x.clone(),
            };
            z += math::dot(&h[..d], &out);
            GmfCache { pb, oq, x, out }
        });
        let off = if gmf.is_some() { d } else { 0 };
        let mlp = self.mlp.as_ref().map(|f| {
            let onehot = (self.kind.variant == Variant::Ma).then_some((market, self.n_markets));
            let m0 = mlp_input(f.p.row(user), f.q.row(item), b, o, onehot);
            let (inputs, pre, out) = mlp_tower(m0, &self.layers);
            z += math::dot(&h[off..], &out);
            MlpCache { inputs, pre, out }
        });
        Cache { z, gmf, mlp }
    }

    /// Adds `dz · ∂z/∂θ` for one pair into `g`.
    fn backward(&self, ctx: &PrototypeContext, user: usize, item: usize, cache: &Cache, dz: f64, g: &mut Self) {
        let (b, o) = self.gates(ctx, user);
        let market = ctx.market_of(user);
        let d = self.dim();
        let h = self.h.data();
        let mut off = 0;
        if let (Some(c), Some(gf)) = (&cache.gmf, g.gmf.as_mut()) {
            let gh = g.h.data_mut();
            let mut dx: Vec<f64> = (0..d).map(|k| dz * h[k]).collect();
            for k in 0..d {
                gh[k] += dz * c.out[k];
            }
            if let (Some(a), Some(ga)) = (&self.market, g.market.as_mut()) {
                let arow = a.row(market);
                let garow = ga.row_mut(market);
                for k in 0..d {
                    garow[k] += dx[k] * c.x[k];
                    dx[k] *= arow[k];
                }
            }
            let gp = gf.p.row_mut(user);
            for k in 0..d {
                gp[k] += dx[k] * c.oq[k] * b[k];
            }
            let gq = gf.q.row_mut(item);
            for k in 0..d {
                gq[k] += dx[k] * c.pb[k] * o[k];
            }
            off = d;
        }
        if let (Some(c), Some(gf)) = (&cache.mlp, g.mlp.as_mut()) {
            let gh = g.h.data_mut();
            for (k, &m) in c.out.iter().enumerate() {
                gh[off + k] += dz * m;
            }
            let mut dm: Vec<f64> = h[off..].iter().map(|&x| dz * x).collect();
            for l in (0..self.layers.len()).rev() {
                let da: Vec<f64> = dm.iter().zip(&c.pre[l]).map(|(x, &a)| x * relu_grad(a)).collect();
                let layer = &self.layers[l];
                let gl = &mut g.layers[l];
                gl.w.add_outer(&da, &c.inputs[l], 1.0).expect("layer shapes");
                for (gb, x) in gl.b.data_mut().iter_mut().zip(&da) {
                    *gb += x;
                }
                dm = layer.w.matvec_t(&da).expect("layer shapes");
            }
            let gp = gf.p.row_mut(user);
            for k in 0..d {
                gp[k] += dm[k] * b[k];
            }
            let gq = gf.q.row_mut(item);
            for k in 0..d {
                gq[k] += dm[d + k] * o[k];
            }
        }
    }

    fn check_ids(&self, ctx: &PrototypeContext, user: usize, item: usize) -> Result<()> {
        if user >= self.n_users() || user >= ctx.n_users() {
            return Err(Error::UnknownId { kind: "user", id: user as u64 });
        }
        if item >= self.n_items() {
            return Err(Error::UnknownId { kind: "item", id: item as u64 });
        }
        Ok(())
    }

    /// Pre-sigmoid score. Ranking uses this so saturated probabilities do not tie.
    pub fn logit(&self, ctx: &PrototypeContext, user: usize, item: usize) -> Result<f64> {
        self.check_ids(ctx, user, item)?;
        Ok(self.forward(ctx, user, item).z)
    }

    /// Mean BCE over `batch`; writes the gradient into `grads` (overwritten).
    pub fn batch_loss_and_grad(&self, ctx: &PrototypeContext, batch: &[Sample], grads: &mut Self) -> f64 {
        grads.zero();
        if batch.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            let cache = self.forward(ctx, s.user, s.item);
            loss += bce_loss(sigmoid_clamped(cache.z), s.label);
            self.backward(ctx, s.user, s.item, &cache, (sigmoid(cache.z) - s.label) * scale, grads);
        }
        loss * scale
    }
}

/// `ŷ` for a known pair; base and market-aware heads ignore the prototypes.
pub fn predict(params: &HeadParameters, ctx: &PrototypeContext, user: usize, item: usize) -> Result<f64> {
    params.logit(ctx, user, item).map(sigmoid_clamped)
}

/// Starting point for head training.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadInit {
    Random,
    /// Initial user and item tables (`n_users x d`, `n_items x d`) for every branch.
    Tables { p: Tensor2, q: Tensor2 },
    /// NMF only: pretrained GMF and MLP heads of the same variant.
    Pretrained {
        gmf: alloc::boxed::Box<HeadParameters>,
        mlp: alloc::boxed::Box<HeadParameters>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub params: HeadParameters,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Draws a uniformly random item the user has not interacted with in `train`.
fn draw_unseen(seen: &[usize], n_items: usize, rng: &mut rng::Rng) -> Option<usize> {
    if seen.len() >= n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..n_items);
        if seen.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

/// Pointwise BCE with `neg_per_pos` fresh negatives per positive each epoch,
/// minibatch Adam. Prototypes in `ctx` stay fixed.
pub fn train_head(
    kind: HeadKind,
    train: &Dataset,
    ctx: &PrototypeContext,
    config: &HeadConfig,
    init: HeadInit,
    seed: u64,
) -> Result<TrainedHead> {
    config.validate()?;
    if train.interactions().is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if ctx.n_users() != train.n_users() || ctx.n_markets() != train.n_markets() {
        return Err(Error::shape(
            alloc::format!("context for {} users / {} markets", ctx.n_users(), ctx.n_markets()),
            alloc::format!("{} users / {} markets", train.n_users(), train.n_markets()),
        ));
    }
    if kind.variant == Variant::Dgre {
        check_dims("prototype context", ctx.dim(), config.dim)?;
    }
    let mut rng = rng::seeded(seed);
    let mut params = match init {
        HeadInit::Pretrained { gmf, mlp } => {
            if kind.backbone != Backbone::Nmf {
                return Err(Error::invalid("init", "pretrained branches only apply to NMF"));
            }
            let p = HeadParameters::nmf_from_pretrained(&gmf, &mlp)?;
            if p.kind != kind {
                return Err(Error::invalid("init", alloc::format!("pretrained branches are {}", p.kind)));
            }
            p
        }
        other => {
            if kind.backbone == Backbone::Nmf && kind.variant == Variant::Dgre {
                return Err(Error::MissingPretrained("gated NMF needs pretrained gated GMF and MLP heads"));
            }
            let mut p = HeadParameters::init(kind, train.n_users(), train.n_items(), train.n_markets(), config, &mut rng)?;
            if let HeadInit::Tables { p: pt, q: qt } = other {
                if pt.shape() != (train.n_users(), config.dim) || qt.shape() != (train.n_items(), config.dim) {
                    return Err(Error::shape(
                        alloc::format!("init tables {}x{} / {}x{}", pt.rows(), pt.cols(), qt.rows(), qt.cols()),
                        alloc::format!("{}x{} / {}x{}", train.n_users(), config.dim, train.n_items(), config.dim),
                    ));
                }
                for f in p.gmf.iter_mut().chain(p.mlp.iter_mut()) {
                    f.p = pt.clone();
                    f.q = qt.clone();
                }
            }
            p
        }
    };

    let seen: Vec<Vec<usize>> = (0..train.n_users())
        .map(|u| train.user_interactions(u).iter().map(|it| it.item).collect())
        .collect();
    let mut adam = Adam::for_model(AdamConfig::with_lr(config.lr), &params);
    let mut grads = params.zeros_like();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut samples = Vec::with_capacity(train.interactions().len() * (1 + config.neg_per_pos));
    for _ in 0..config.epochs {
        samples.clear();
        for it in train.interactions() {
            samples.push(Sample {
                user: it.user,
                item: it.item,
                label: 1.0,
            });
            for _ in 0..config.neg_per_pos {
                if let Some(j) = draw_unseen(&seen[it.user], train.n_items(), &mut rng) {
                    samples.push(Sample {
                        user: it.user,
                        item: j,
                        label: 0.0,
                    });
                }
            }
        }
        shuffle(&mut samples, &mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(config.batch_size) {
            total += params.batch_loss_and_grad(ctx, batch, &mut grads) * batch.len() as f64;
            adam.step_model(&mut params, &grads)?;
        }
        trace.push(total / samples.len() as f64);
    }
    Ok(TrainedHead {
        params,
        loss_trace: trace,
    })
}

impl fmt::Display for Factors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P {}x{}, Q {}x{}", self.p.rows(), self.p.cols(), self.q.rows(), self.q.cols())
    }
}

/// Short human-readable description of a head's tensor shapes.
pub fn describe(params: &HeadParameters) -> String {
    let mut s = params.kind.to_string();
    if let Some(f) = &params.gmf {
        s.push_str(&alloc::format!("; gmf {f}"));
    }
    if let Some(f) = &params.mlp {
        s.push_str(&alloc::format!("; mlp {f}"));
    }
    for l in &params.layers {
        s.push_str(&alloc::format!("; dense {}->{}", l.input(), l.output()));
    }
    s.push_str(&alloc::format!("; h {}", params.h.cols()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    fn vecn(n: usize, std: f64, seed: u64) -> Vec<f64> {
        let mut v = vec![0.0; n];
        rng::fill_normal(&mut rng::seeded(seed), &mut v, std);
        v
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + math::exp(-x))
    }

    fn random_layers(widths: &[usize], seed: u64) -> Vec<Dense> {
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut l = Dense::zeros(w[0], w[1]);
                l.w = Tensor2::new(w[1], w[0], vecn(w[0] * w[1], 0.7, seed + i as u64)).unwrap();
                l.b = Tensor2::new(1, w[1], vecn(w[1], 0.3, seed + 100 + i as u64)).unwrap();
                l
            })
            .collect()
    }

    /// Tower oracle written with explicit index loops.
    fn tower_oracle(x: &[f64], layers: &[Dense]) -> Vec<f64> {
        let mut m = x.to_vec();
        for l in layers {
            let mut next = vec![0.0; l.output()];
            for r in 0..l.output() {
                let mut a = l.b.get(0, r);
                for c in 0..l.input() {
                    a += l.w.get(r, c) * m[c];
                }
                next[r] = if a > 0.0 { a } else { 0.0 };
            }
            m = next;
        }
        m
    }

    #[test]
    fn gmf_cases() {
        let ones = [1.0, 1.0];
        assert_eq!(gmf_forward(&[0.3, -2.0], &[1.0, 4.0], &ones, &ones, &[0.0, 0.0]).unwrap(), 0.5);
        let y = gmf_forward(&[1.0, 1.0], &[1.0, 1.0], &[2.0, 0.0], &ones, &ones).unwrap();
        assert!((y - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!(gmf_forward(&[1.0], &[1.0, 1.0], &[1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn gmf_matches_oracle() {
        for seed in 0..200u64 {
            let d = 1 + (seed % 7) as usize;
            let [p, q, b, o, h] = [0, 1, 2, 3, 4].map(|i| vecn(d, 1.0, seed * 10 + i));
            let mut t = 0.0;
            for c in 0..d {
                let pb = p[c] * b[c];
                let oq = o[c] * q[c];
                t += h[c] * (pb * oq);
            }
            assert!((gmf_forward(&p, &q, &b, &o, &h).unwrap() - sig(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_cases() {
        let d = 3;
        let ones = vec![1.0; d];
        let zero_layers = vec![Dense::zeros(6, 4), Dense::zeros(4, 2)];
        let p = vecn(d, 1.0, 1);
        let q = vecn(d, 1.0, 2);
        assert_eq!(mlp_forward(&p, &q, &ones, &ones, &zero_layers, &[0.4, -0.2]).unwrap(), 0.5);
        let mut id = Dense::zeros(6, 6);
        id.w = Tensor2::identity(6);
        let h = vecn(6, 1.0, 3);
        let concat: Vec<f64> = p.iter().chain(&q).map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let want = sig(h.iter().zip(&concat).map(|(a, b)| a * b).sum());
        assert!((mlp_forward(&p, &q, &ones, &ones, &[id], &h).unwrap() - want).abs() < 1e-12);
        assert!(mlp_forward(&p, &q, &ones, &ones, &zero_layers, &[0.0; 3]).is_err());
    }

    #[test]
    fn mlp_and_nmf_match_oracle() {
        for seed in 0..150u64 {
            let d = 2 + (seed % 3) as usize;
            let widths = [2 * d, 5, 3];
            let layers = random_layers(&widths, seed);
            let [p, q, pm, qm, b, o] = [0, 1, 2, 3, 4, 5].map(|i| vecn(d, 1.0, seed * 20 + i));
            let hm = vecn(3, 1.0, seed * 20 + 6);
            let mut x = Vec::new();
            for c in 0..d {
                x.push(pm[c] * b[c]);
            }
            for c in 0..d {
                x.push(o[c] * qm[c]);
            }
            let out = tower_oracle(&x, &layers);
            let zm: f64 = (0..3).map(|c| hm[c] * out[c]).sum();
            assert!((mlp_forward(&pm, &qm, &b, &o, &layers, &hm).unwrap() - sig(zm)).abs() < 1e-12);

            let hg = vecn(d, 1.0, seed * 20 + 7);
            let zg: f64 = (0..d).map(|c| hg[c] * p[c] * b[c] * o[c] * q[c]).sum();
            let h: Vec<f64> = hg.iter().chain(&hm).copied().collect();
            let y = nmf_forward(&p, &q, &pm, &qm, &b, &o, &layers, &h).unwrap();
            assert!((y - sig(zg + zm)).abs() < 1e-12);
        }
    }

    #[test]
    fn nmf_block_structure() {
        let d = 3;
        let layers = vec![Dense::zeros(6, 4)];
        let [p, q, b, o] = [0, 1, 2, 3].map(|i| vecn(d, 1.0, 40 + i));
        let hg = vecn(d, 1.0, 50);
        let h: Vec<f64> = hg.iter().copied().chain([0.0; 4]).collect();
        let y = nmf_forward(&p, &q, &p, &q, &b, &o, &layers, &h).unwrap();
        assert_eq!(y, gmf_forward(&p, &q, &b, &o, &hg).unwrap());
    }

    fn toy() -> (Dataset, PrototypeContext) {
        use crate::data::{MarketId, RawInteraction};
        let rec = |m: &str, u: u64, i: u64| RawInteraction {
            market: MarketId::new(m).unwrap(),
            user: u,
            item: i,
            timestamp: (u * 10 + i) as i64,
        };
        let ds = Dataset::from_records(vec![
            rec("de", 0, 0),
            rec("de", 0, 1),
            rec("de", 1, 2),
            rec("jp", 2, 3),
            rec("jp", 2, 0),
        ])
        .unwrap();
        let d = 2;
        let ctx = PrototypeContext::new(
            Tensor2::new(3, d, vecn(3 * d, 1.0, 77)).unwrap(),
            Tensor2::new(2, d, vecn(2 * d, 1.0, 78)).unwrap(),
            ds.user_markets().to_vec(),
            true,
            true,
        )
        .unwrap();
        (ds, ctx)
    }

    fn toy_config() -> HeadConfig {
        HeadConfig {
            dim: 2,
            mlp_layers: vec![4, 3, 2],
            ..Default::default()
        }
    }

    fn toy_params(kind: HeadKind, seed: u64) -> HeadParameters {
        let cfg = toy_config();
        let mut p = HeadParameters::init(kind, 3, 4, 2, &cfg, &mut rng::seeded(seed)).unwrap();
        // Move everything off its initial values so no coordinate is trivially zero.
        let flat: Vec<f64> = vecn(p.num_params(), 0.8, seed + 1);
        p.load_flat(&flat);
        p
    }

    fn toy_batch() -> Vec<Sample> {
        let mut out = Vec::new();
        for u in 0..3 {
            for i in 0..4 {
                out.push(Sample {
                    user: u,
                    item: i,
                    label: ((u + i) % 2) as f64,
                });
            }
        }
        out
    }

    #[test]
    fn every_head_passes_gradient_check() {
        let (_, ctx) = toy();
        let batch = toy_batch();
        for kind in HeadKind::all() {
            for seed in 0..3 {
                let params = toy_params(kind, seed);
                let mut grads = params.zeros_like();
                params.batch_loss_and_grad(&ctx, &batch, &mut grads);
                let err = finite_diff_check(
                    |x| {
                        let mut probe = params.clone();
                        probe.load_flat(x);
                        let mut scratch = probe.zeros_like();
                        probe.batch_loss_and_grad(&ctx, &batch, &mut scratch)
                    },
                    &params.flatten(),
                    &grads.flatten(),
                    1e-5,
                );
                assert!(err < 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let (_, ctx) = toy();
        let batch = toy_batch();
        let params = toy_params(HeadKind::new(Backbone::Gmf, Variant::Dgre), 4);
        let mut grads = params.zeros_like();
        params.batch_loss_and_grad(&ctx, &batch, &mut grads);
        let wrong: Vec<f64> = grads.flatten().iter().map(|g| -g).collect();
        let err = finite_diff_check(
            |x| {
                let mut probe = params.clone();
                probe.load_flat(x);
                let mut scratch = probe.zeros_like();
                probe.batch_loss_and_grad(&ctx, &batch, &mut scratch)
            },
            &params.flatten(),
            &wrong,
            1e-5,
        );
        assert!(err > 0.1);
    }

    #[test]
    fn unit_prototypes_reduce_to_base() {
        let (ds, _) = toy();
        let ones = PrototypeContext::new(
            Tensor2::filled(3, 2, 1.0),
            Tensor2::filled(2, 2, 1.0),
            ds.user_markets().to_vec(),
            true,
            true,
        )
        .unwrap();
        for backbone in [Backbone::Gmf, Backbone::Mlp, Backbone::Nmf] {
            let gated = toy_params(HeadKind::new(backbone, Variant::Dgre), 9);
            let plain = HeadParameters {
                kind: HeadKind::new(backbone, Variant::Base),
                ..gated.clone()
            };
            for u in 0..3 {
                for i in 0..4 {
                    let a = predict(&gated, &ones, u, i).unwrap();
                    let b = predict(&plain, &ones, u, i).unwrap();
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn predict_dispatches_to_forward() {
        let (_, ctx) = toy();
        let gmf = toy_params(HeadKind::new(Backbone::Gmf, Variant::Dgre), 11);
        let mlp = toy_params(HeadKind::new(Backbone::Mlp, Variant::Dgre), 12);
        let nmf = toy_params(HeadKind::new(Backbone::Nmf, Variant::Dgre), 13);
        for u in 0..3 {
            let (b, o) = (ctx.b(u), ctx.o(ctx.market_of(u)));
            for i in 0..4 {
                let g = gmf.gmf.as_ref().unwrap();
                let want = gmf_forward(g.p.row(u), g.q.row(i), b, o, gmf.h.data()).unwrap();
                assert_eq!(predict(&gmf, &ctx, u, i).unwrap(), want);
                let m = mlp.mlp.as_ref().unwrap();
                let want = mlp_forward(m.p.row(u), m.q.row(i), b, o, &mlp.layers, mlp.h.data()).unwrap();
                assert_eq!(predict(&mlp, &ctx, u, i).unwrap(), want);
                let (g, m) = (nmf.gmf.as_ref().unwrap(), nmf.mlp.as_ref().unwrap());
                let want = nmf_forward(g.p.row(u), g.q.row(i), m.p.row(u), m.q.row(i), b, o, &nmf.layers, nmf.h.data())
                    .unwrap();
                assert!((predict(&nmf, &ctx, u, i).unwrap() - want).abs() < 1e-15);
            }
        }
        assert!(predict(&gmf, &ctx, 3, 0).is_err());
        assert!(predict(&gmf, &ctx, 0, 4).is_err());
    }

    #[test]
    fn nulled_signals_predict_one_half() {
        let (ds, ctx) = toy();
        let mut base = toy_params(HeadKind::new(Backbone::Gmf, Variant::Base), 5);
        base.h.fill(0.0);
        let mut zero_o = ctx.clone();
        zero_o.market_vectors.fill(0.0);
        let dgre = toy_params(HeadKind::new(Backbone::Gmf, Variant::Dgre), 6);
        for u in 0..3 {
            for i in 0..4 {
                assert_eq!(predict(&base, &ctx, u, i).unwrap(), 0.5);
                assert_eq!(predict(&dgre, &zero_o, u, i).unwrap(), 0.5);
            }
        }
        let _ = ds;
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in HeadKind::all() {
            assert_eq!(kind.to_string().parse::<HeadKind>().unwrap(), kind);
        }
        assert_eq!("DGRE-GMF".parse::<HeadKind>().unwrap(), HeadKind::new(Backbone::Gmf, Variant::Dgre));
        assert_eq!("nmf".parse::<HeadKind>().unwrap(), HeadKind::new(Backbone::Nmf, Variant::Base));
        assert!("gmf-x".parse::<HeadKind>().is_err());
    }

    fn small_synth() -> Dataset {
        let cfg = SynthConfig {
            markets: 2,
            users_per_market: 30,
            items: 60,
            groups: 2,
            items_per_group: 30,
            p_in: 0.3,
            p_out: 0.03,
        };
        generate_synthetic(&cfg, 3).unwrap().0
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = small_synth();
        let cfg = HeadConfig {
            epochs: 12,
            lr: 0.01,
            ..Default::default()
        };
        let ctx = PrototypeContext::disabled(cfg.dim, ds.user_markets().to_vec(), ds.n_markets());
        for backbone in [Backbone::Gmf, Backbone::Mlp] {
            let kind = HeadKind::new(backbone, Variant::Base);
            let a = train_head(kind, &ds, &ctx, &cfg, HeadInit::Random, 1).unwrap();
            for w in a.loss_trace.windows(3) {
                assert!(w[2] <= w[0] + 1e-3, "{kind}: {:?}", a.loss_trace);
            }
            assert!(a.loss_trace.last().unwrap() < &a.loss_trace[0]);
            let b = train_head(kind, &ds, &ctx, &cfg, HeadInit::Random, 1).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gated_nmf_requires_pretraining() {
        let ds = small_synth();
        let cfg = HeadConfig {
            epochs: 1,
            ..Default::default()
        };
        let ctx = PrototypeContext::disabled(cfg.dim, ds.user_markets().to_vec(), ds.n_markets()).with_flags(true, true);
        let nmf = HeadKind::new(Backbone::Nmf, Variant::Dgre);
        assert!(matches!(
            train_head(nmf, &ds, &ctx, &cfg, HeadInit::Random, 0),
            Err(Error::MissingPretrained(_))
        ));
        let gmf = train_head(HeadKind::new(Backbone::Gmf, Variant::Dgre), &ds, &ctx, &cfg, HeadInit::Random, 0).unwrap();
        let mlp = train_head(HeadKind::new(Backbone::Mlp, Variant::Dgre), &ds, &ctx, &cfg, HeadInit::Random, 0).unwrap();
        let init = HeadInit::Pretrained {
            gmf: alloc::boxed::Box::new(gmf.params),
            mlp: alloc::boxed::Box::new(mlp.params),
        };
        let fused = train_head(nmf, &ds, &ctx, &cfg, init, 0).unwrap();
        assert_eq!(fused.params.h.cols(), 16 + 8);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let ds = small_synth();
        let empty = ds.with_interactions(Vec::new());
        let cfg = HeadConfig::default();
        let ctx = PrototypeContext::disabled(cfg.dim, ds.user_markets().to_vec(), ds.n_markets());
        let kind = HeadKind::new(Backbone::Gmf, Variant::Base);
        assert_eq!(train_head(kind, &empty, &ctx, &cfg, HeadInit::Random, 0), Err(Error::EmptyTrainSet));
    }

    #[test]
    fn soft_mixture_and_argmax() {
        let protos = Tensor2::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor2::new(2, 2, vec![0.75, 0.25, 0.5, 0.5]).unwrap();
        let hard = resolve_user_prototypes(&protos, &w, SharedChoice::Argmax).unwrap();
        assert_eq!(hard.data(), &[1.0, 0.0, 1.0, 0.0]);
        let soft = resolve_user_prototypes(&protos, &w, SharedChoice::SoftMixture).unwrap();
        assert_eq!(soft.data(), &[0.75, 0.25, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn predictions_are_strict_probabilities(seed in 0u64..10_000, scale in 0.1f64..50.0) {
            let (_, ctx) = toy();
            for kind in HeadKind::all() {
                let mut p = toy_params(kind, seed);
                let flat: Vec<f64> = p.flatten().iter().map(|x| x * scale).collect();
                p.load_flat(&flat);
                for u in 0..3 {
                    for i in 0..4 {
                        let y = predict(&p, &ctx, u, i).unwrap();
                        prop_assert!(y > 0.0 && y < 1.0);
                    }
                }
            }
        }

        #[test]
        fn scaling_o_keeps_gmf_ranking(seed in 0u64..10_000, c in 0.05f64..20.0) {
            let (_, ctx) = toy();
            let params = toy_params(HeadKind::new(Backbone::Gmf, Variant::Dgre), seed);
            let mut scaled = ctx.clone();
            scaled.market_vectors = ctx.market_vectors.map(|x| x * c);
            for u in 0..3 {
                let a: Vec<f64> = (0..4).map(|i| params.logit(&ctx, u, i).unwrap()).collect();
                let b: Vec<f64> = (0..4).map(|i| params.logit(&scaled, u, i).unwrap()).collect();
                for i in 0..4 {
                    for j in 0..4 {
                        if (a[i] - a[j]).abs() > 1e-9 {
                            prop_assert_eq!(a[i] > a[j], b[i] > b[j]);
                        }
                    }
                }
            }
        }
    }
}
