//! End-to-end stages: filtering and split, graphs, graph embeddings,
//! prototypes, head training and evaluation, plus the two ablation drivers.
//!
//! Every stage takes the run seed and derives its own stream from a fixed
//! tag, so a stage's output depends only on its inputs and the seed.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{filter_min_interactions, leave_one_out_split, Dataset, MarketId, SplitDataset};
use crate::eval::{evaluate, EvalConfig, HeadScorer, RankingMetrics};
use crate::gnn::{train_unsupervised, EmbeddingTable, SageConfig, TrainedEmbedding};
use crate::graph::{build_item_graph, build_user_graph, InteractionGraph};
use crate::heads::{
    resolve_user_prototypes, train_head, Backbone, HeadConfig, HeadInit, HeadKind, PrototypeContext, SharedChoice,
    TrainedHead, Variant,
};
use crate::market_proto::{build_market_prototype, MarketProtoConfig, MarketPrototype};
use crate::numerics::Tensor2;
use crate::user_proto::{detect_communities, refine_embeddings, select_prototypes, CommunityPartition, RefineConfig, SoftAssignment, UserPrototypeSet};
use crate::{math, rng, Error, Result};

/// How a prototype vector becomes a multiplicative gate in head space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateTransform {
    /// The projected vector rescaled to unit RMS.
    Raw,
    /// Absolute values of the projected vector, rescaled to mean 1.
    #[default]
    Magnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub min_interactions: usize,
    pub min_common_items: usize,
    pub min_common_users: usize,
    pub embed: SageConfig,
    pub k_proto: usize,
    pub alpha: f64,
    pub refine: RefineConfig,
    pub shared_choice: SharedChoice,
    pub gate: GateTransform,
    pub market: MarketProtoConfig,
    pub head: HeadConfig,
    pub head_kind: HeadKind,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_interactions: 5,
            min_common_items: 2,
            min_common_users: 2,
            embed: SageConfig::default(),
            k_proto: 10,
            alpha: 1.0,
            refine: RefineConfig::default(),
            shared_choice: SharedChoice::Argmax,
            gate: GateTransform::default(),
            market: MarketProtoConfig::default(),
            head: HeadConfig::default(),
            head_kind: HeadKind::new(Backbone::Gmf, Variant::Dgre),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_common_items == 0 {
            return Err(Error::invalid("min_common_items", "must be at least 1"));
        }
        if self.min_common_users == 0 {
            return Err(Error::invalid("min_common_users", "must be at least 1"));
        }
        if self.k_proto == 0 {
            return Err(Error::invalid("k_proto", "must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        if self.market.k_s == 0 {
            return Err(Error::invalid("k_s", "must be at least 1"));
        }
        if self.embed.dim == 0 {
            return Err(Error::invalid("d_graph", "must be at least 1"));
        }
        if self.eval.k == 0 {
            return Err(Error::invalid("k_cutoff", "must be at least 1"));
        }
        self.head.validate()
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive(self.seed, rng::tag(stage))
    }

    /// Evaluation candidates are shared by every run with the same seed.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.stage_seed("eval"),
            ..self.eval
        }
    }
}

/// Min-count filtering followed by the leave-one-out split.
pub fn prepare(raw: &Dataset, config: &PipelineConfig) -> Result<SplitDataset> {
    let filtered = filter_min_interactions(raw, config.min_interactions)?;
    leave_one_out_split(&filtered)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graphs {
    pub user: InteractionGraph,
    /// One item graph per market, in market order.
    pub items: Vec<(MarketId, InteractionGraph)>,
}

pub fn build_graphs(train: &Dataset, config: &PipelineConfig) -> Result<Graphs> {
    let user = build_user_graph(train, config.min_common_items)?;
    let items = train
        .markets()
        .iter()
        .map(|m| Ok((m.clone(), build_item_graph(train, m.as_str(), config.min_common_users)?)))
        .collect::<Result<_>>()?;
    Ok(Graphs { user, items })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddings {
    pub user: TrainedEmbedding,
    pub items: Vec<TrainedEmbedding>,
}

pub fn embed_user_graph(graphs: &Graphs, config: &PipelineConfig) -> Result<TrainedEmbedding> {
    train_unsupervised(&graphs.user, &config.embed, config.stage_seed("embed/user"))
}

pub fn embed_item_graph(market: &MarketId, g: &InteractionGraph, config: &PipelineConfig) -> Result<TrainedEmbedding> {
    let seed = rng::derive(config.stage_seed("embed/item"), rng::tag(market.as_str()));
    train_unsupervised(g, &config.embed, seed)
}

pub fn embed_graphs(graphs: &Graphs, config: &PipelineConfig) -> Result<GraphEmbeddings> {
    Ok(GraphEmbeddings {
        user: embed_user_graph(graphs, config)?,
        items: graphs
            .items
            .iter()
            .map(|(m, g)| embed_item_graph(m, g, config))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserPrototypes {
    pub partition: CommunityPartition,
    pub prototypes: UserPrototypeSet,
    /// User embeddings after the KL refinement.
    pub refined: EmbeddingTable,
    pub refine_trace: Vec<f64>,
    /// Soft assignment of the refined embeddings.
    pub assignment: SoftAssignment,
}

pub fn build_user_prototypes(
    graphs: &Graphs,
    user_embeddings: &EmbeddingTable,
    partition: &CommunityPartition,
    config: &PipelineConfig,
) -> Result<UserPrototypes> {
    let prototypes = select_prototypes(&graphs.user, user_embeddings, partition, config.k_proto, config.alpha)?;
    let (refined, refine_trace) = refine_embeddings(user_embeddings, &prototypes, &config.refine)?;
    let assignment = SoftAssignment::compute(&refined, &prototypes)?;
    Ok(UserPrototypes {
        partition: partition.clone(),
        prototypes,
        refined,
        refine_trace,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub users: UserPrototypes,
    /// Per market, in market order; a market whose prototype failed keeps its error.
    pub markets: Vec<(MarketId, core::result::Result<MarketPrototype, Error>)>,
}

impl Prototypes {
    pub fn market_failures(&self) -> impl Iterator<Item = (&MarketId, &Error)> {
        self.markets.iter().filter_map(|(m, r)| r.as_ref().err().map(|e| (m, e)))
    }
}

/// One market's prototype, with `k_s` clamped to the size of its item graph.
/// Every market uses the same seed.
pub fn market_prototype(
    market: &MarketId,
    g: &InteractionGraph,
    q: &EmbeddingTable,
    config: &PipelineConfig,
) -> Result<MarketPrototype> {
    let cfg = MarketProtoConfig {
        k_s: config.market.k_s.min(g.n_nodes()).max(1),
        ..config.market
    };
    build_market_prototype(market.clone(), g, q, &cfg, config.stage_seed("proto/market"))
}

pub fn build_market_prototypes(
    graphs: &Graphs,
    embeddings: &GraphEmbeddings,
    config: &PipelineConfig,
) -> Vec<(MarketId, Result<MarketPrototype>)> {
    graphs
        .items
        .iter()
        .zip(&embeddings.items)
        .map(|((m, g), e)| (m.clone(), market_prototype(m, g, &e.embeddings, config)))
        .collect()
}

pub fn build_prototypes(graphs: &Graphs, embeddings: &GraphEmbeddings, config: &PipelineConfig) -> Result<Prototypes> {
    let partition = detect_communities(&graphs.user);
    Ok(Prototypes {
        users: build_user_prototypes(graphs, &embeddings.user.embeddings, &partition, config)?,
        markets: build_market_prototypes(graphs, embeddings, config),
    })
}

/// Gaussian map from graph space to head space with `E‖Rx‖² = ‖x‖²`.
pub fn projection(d_graph: usize, d_head: usize, seed: u64) -> Tensor2 {
    let mut r = Tensor2::zeros(d_head, d_graph);
    rng::fill_normal(&mut rng::seeded(seed), r.data_mut(), 1.0 / math::sqrt(d_head as f64));
    r
}

fn project_rows(x: &Tensor2, r: &Tensor2) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(x.rows(), r.rows());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&r.matvec(x.row(i))?);
    }
    Ok(out)
}

/// Turns a head-space prototype into a gate.
pub fn gate(v: &[f64], transform: GateTransform) -> Vec<f64> {
    match transform {
        GateTransform::Raw => {
            let rms = math::sqrt(v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64);
            if rms == 0.0 {
                return vec![0.0; v.len()];
            }
            v.iter().map(|x| x / rms).collect()
        }
        GateTransform::Magnitude => {
            let mean = v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64;
            if mean == 0.0 {
                return vec![0.0; v.len()];
            }
            v.iter().map(|x| x.abs() / mean).collect()
        }
    }
}

/// Everything a head needs besides the data: the prototype context and initial tables.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub ctx: PrototypeContext,
    /// Initial user table: projected refined user embeddings.
    pub p_init: Tensor2,
    /// Initial item table: mean initial vector of each item's training users.
    pub q_init: Tensor2,
}

pub fn head_inputs(train: &Dataset, prototypes: &Prototypes, config: &PipelineConfig) -> Result<HeadInputs> {
    let d = config.head.dim;
    let r = projection(config.embed.dim, d, config.stage_seed("head/projection"));
    let p_init = project_rows(prototypes.users.refined.as_tensor(), &r)?;

    let mut init_rng = rng::seeded(config.stage_seed("head/item-init"));
    let mut q_init = Tensor2::zeros(train.n_items(), d);
    rng::fill_normal(&mut init_rng, q_init.data_mut(), config.head.init_std);
    let by_item = train.users_by_item();
    for (j, users) in by_item.iter().enumerate() {
        if users.is_empty() {
            continue;
        }
        let row = q_init.row_mut(j);
        row.fill(0.0);
        for &u in users {
            for (o, x) in row.iter_mut().zip(p_init.row(u)) {
                *o += x;
            }
        }
        let inv = 1.0 / users.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }

    let protos = project_rows(&prototypes.users.prototypes.prototypes, &r)?;
    let mut gated = Tensor2::zeros(protos.rows(), d);
    for k in 0..protos.rows() {
        gated.row_mut(k).copy_from_slice(&gate(protos.row(k), config.gate));
    }
    let user_vectors = resolve_user_prototypes(&gated, &prototypes.users.assignment.w, config.shared_choice)?;

    let mut market_vectors = Tensor2::filled(train.n_markets(), d, 1.0);
    for (l, (_, result)) in prototypes.markets.iter().enumerate() {
        if let Ok(mp) = result {
            let projected = r.matvec(&mp.vector)?;
            market_vectors.row_mut(l).copy_from_slice(&gate(&projected, config.gate));
        }
    }
    let ctx = PrototypeContext::new(user_vectors, market_vectors, train.user_markets().to_vec(), true, true)?;
    Ok(HeadInputs { ctx, p_init, q_init })
}

/// Trains `kind`. Prototype-gated heads start from the graph-derived tables;
/// NMF heads first train their GMF and MLP branches of the same variant.
pub fn train_kind(kind: HeadKind, train: &Dataset, inputs: &HeadInputs, config: &PipelineConfig) -> Result<TrainedHead> {
    let seed = config.stage_seed("head/train");
    let ctx = match kind.variant {
        Variant::Dgre => inputs.ctx.clone(),
        _ => inputs.ctx.with_flags(false, false),
    };
    let tables = || match kind.variant {
        Variant::Dgre => HeadInit::Tables {
            p: inputs.p_init.clone(),
            q: inputs.q_init.clone(),
        },
        _ => HeadInit::Random,
    };
    if kind.backbone == Backbone::Nmf {
        let gmf = train_head(HeadKind::new(Backbone::Gmf, kind.variant), train, &ctx, &config.head, tables(), seed)?;
        let mlp = train_head(HeadKind::new(Backbone::Mlp, kind.variant), train, &ctx, &config.head, tables(), seed)?;
        let init = HeadInit::Pretrained {
            gmf: Box::new(gmf.params),
            mlp: Box::new(mlp.params),
        };
        return train_head(kind, train, &ctx, &config.head, init, seed);
    }
    train_head(kind, train, &ctx, &config.head, tables(), seed)
}

/// Trains with an explicit context (used by the prototype on/off ablation).
pub fn train_with_context(
    kind: HeadKind,
    train: &Dataset,
    inputs: &HeadInputs,
    ctx: &PrototypeContext,
    config: &PipelineConfig,
) -> Result<TrainedHead> {
    let swapped = HeadInputs {
        ctx: ctx.clone(),
        ..inputs.clone()
    };
    train_kind(kind, train, &swapped, config)
}

pub fn evaluate_head(split: &SplitDataset, head: &TrainedHead, ctx: &PrototypeContext, config: &PipelineConfig) -> Result<RankingMetrics> {
    let ctx = if head.params.kind.variant == Variant::Dgre {
        ctx.clone()
    } else {
        ctx.with_flags(false, false)
    };
    evaluate(
        &HeadScorer {
            params: &head.params,
            ctx: &ctx,
        },
        split,
        &config.eval_config(),
    )
}

/// Output of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub split: SplitDataset,
    pub graphs: Graphs,
    pub embeddings: GraphEmbeddings,
    pub prototypes: Prototypes,
    pub inputs: HeadInputs,
    pub head: TrainedHead,
    pub metrics: RankingMetrics,
}

pub fn run(raw: &Dataset, config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let split = prepare(raw, config)?;
    let graphs = build_graphs(&split.train, config)?;
    let embeddings = embed_graphs(&graphs, config)?;
    let prototypes = build_prototypes(&graphs, &embeddings, config)?;
    let inputs = head_inputs(&split.train, &prototypes, config)?;
    let head = train_kind(config.head_kind, &split.train, &inputs, config)?;
    let metrics = evaluate_head(&split, &head, &inputs.ctx, config)?;
    Ok(RunOutput {
        split,
        graphs,
        embeddings,
        prototypes,
        inputs,
        head,
        metrics,
    })
}

/// Upstream state shared by the ablations: everything that does not depend
/// on `k_proto` or on the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub split: SplitDataset,
    pub graphs: Graphs,
    pub embeddings: GraphEmbeddings,
    pub partition: CommunityPartition,
    pub markets: Vec<(MarketId, core::result::Result<MarketPrototype, Error>)>,
}

pub fn upstream(raw: &Dataset, config: &PipelineConfig) -> Result<Upstream> {
    config.validate()?;
    let split = prepare(raw, config)?;
    let graphs = build_graphs(&split.train, config)?;
    let embeddings = embed_graphs(&graphs, config)?;
    let partition = detect_communities(&graphs.user);
    let markets = build_market_prototypes(&graphs, &embeddings, config);
    Ok(Upstream {
        split,
        graphs,
        embeddings,
        partition,
        markets,
    })
}

impl Upstream {
    pub fn prototypes(&self, config: &PipelineConfig) -> Result<Prototypes> {
        Ok(Prototypes {
            users: build_user_prototypes(&self.graphs, &self.embeddings.user.embeddings, &self.partition, config)?,
            markets: self.markets.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KRow {
    pub k: usize,
    pub metrics: RankingMetrics,
}

/// Reruns user prototypes and head training for each `k_proto`.
pub fn ablate_k(up: &Upstream, config: &PipelineConfig, k_values: &[usize]) -> Result<Vec<KRow>> {
    k_values
        .iter()
        .map(|&k| {
            let cfg = PipelineConfig {
                k_proto: k,
                ..config.clone()
            };
            let protos = up.prototypes(&cfg)?;
            let inputs = head_inputs(&up.split.train, &protos, &cfg)?;
            let head = train_kind(cfg.head_kind, &up.split.train, &inputs, &cfg)?;
            Ok(KRow {
                k,
                metrics: evaluate_head(&up.split, &head, &inputs.ctx, &cfg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EmbeddingAblation {
    Base,
    SharedOnly,
    MarketOnly,
    Full,
}

impl EmbeddingAblation {
    pub const ALL: [EmbeddingAblation; 4] = [Self::Base, Self::SharedOnly, Self::MarketOnly, Self::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::SharedOnly => "shared_only",
            Self::MarketOnly => "market_only",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: EmbeddingAblation,
    pub metrics: RankingMetrics,
}

/// GMF with each prototype side switched on or off. `Base` is the plain GMF
/// head; the other rows are the gated head with the given sides enabled.
pub fn ablate_embeddings(split: &SplitDataset, inputs: &HeadInputs, config: &PipelineConfig) -> Result<Vec<AblationRow>> {
    EmbeddingAblation::ALL
        .iter()
        .map(|&setting| {
            let (kind, shared, market) = match setting {
                EmbeddingAblation::Base => (Variant::Base, false, false),
                EmbeddingAblation::SharedOnly => (Variant::Dgre, true, false),
                EmbeddingAblation::MarketOnly => (Variant::Dgre, false, true),
                EmbeddingAblation::Full => (Variant::Dgre, true, true),
            };
            let kind = HeadKind::new(Backbone::Gmf, kind);
            let ctx = inputs.ctx.with_flags(shared, market);
            let head = train_with_context(kind, &split.train, inputs, &ctx, config)?;
            Ok(AblationRow {
                setting,
                metrics: evaluate_head(split, &head, &ctx, config)?,
            })
        })
        .collect()
}
