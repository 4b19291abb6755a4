//! Pipeline stages as commands. Each stage reads its inputs from the run
//! directory, checks them against the upstream manifests and writes its
//! artifacts plus its own `manifest.json`.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved.toml
//! data/        interactions.tsv groups.tsv (synthetic only)
//! graphs/      user.edges.tsv user.node_index.tsv item_<m>.edges.tsv item_<m>.node_index.tsv test.tsv
//! embed/       user.tsv item_<m>.tsv state.dgre
//! prototypes/  user_prototypes.tsv assignments.tsv communities.tsv market_prototypes.tsv market_items.tsv state.dgre
//! train/       model.dgre loss.tsv
//! eval/        results.tsv
//! ablate/      ablate_k.tsv ablate_embeddings.tsv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dgre_core::data::{generate_synthetic, Dataset, SplitDataset};
use dgre_core::eval::{aggregate, evaluate_case, HeadScorer, RankingMetrics};
use dgre_core::gnn::TrainedEmbedding;
use dgre_core::heads::{PrototypeContext, TrainedHead, Variant};
use dgre_core::pipeline::{
    ablate_embeddings, ablate_k, build_graphs, build_user_prototypes, embed_item_graph, embed_user_graph, head_inputs,
    market_prototype, prepare, train_kind, GraphEmbeddings, Graphs, HeadInputs, PipelineConfig, Prototypes, Upstream,
};
use dgre_core::user_proto::detect_communities;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::bundle::{self, Bundle};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, Format};
use crate::manifest::Manifest;

pub const INTERACTIONS: &str = "data/interactions.tsv";
pub const EMBED_STATE: &str = "embed/state.dgre";
pub const PROTO_STATE: &str = "prototypes/state.dgre";
pub const MODEL: &str = "train/model.dgre";
pub const RESULTS: &str = "eval/results.tsv";
pub const ABLATE_K: &str = "ablate/ablate_k.tsv";
pub const ABLATE_EMBEDDINGS: &str = "ablate/ablate_embeddings.tsv";

pub struct Run {
    pub out: PathBuf,
    pub config: RunConfig,
    pub pipeline: PipelineConfig,
    config_text: String,
    pool: rayon::ThreadPool,
}

fn user_graph_files() -> (String, String) {
    ("graphs/user.edges.tsv".into(), "graphs/user.node_index.tsv".into())
}

fn item_graph_files(market: &str) -> (String, String) {
    (format!("graphs/item_{market}.edges.tsv"), format!("graphs/item_{market}.node_index.tsv"))
}

fn bad_state(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |reason| CliError::format(path, reason)
}

impl Run {
    /// Validates the configuration; `threads = 0` uses every core.
    pub fn new(out: &Path, config: RunConfig, threads: usize) -> Result<Self> {
        let pipeline = config.pipeline()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::config("--threads", e.to_string()))?;
        Ok(Self {
            out: out.to_path_buf(),
            config_text: config.to_toml(),
            config,
            pipeline,
            pool,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn manifest(&self, stage: &str) -> Manifest {
        Manifest::new(stage, self.config.seed(), &self.config_text)
    }

    fn emit(&self, m: &mut Manifest, rel: &str, text: &str) -> Result<()> {
        formats::write_text(&self.path(rel), text)?;
        m.output(&self.out, rel)
    }

    fn emit_bundle(&self, m: &mut Manifest, rel: &str, b: &Bundle) -> Result<()> {
        b.write(&self.path(rel))?;
        m.output(&self.out, rel)
    }

    fn finish(&self, m: Manifest) -> Result<()> {
        formats::write_text(&self.path("config.resolved.toml"), &self.config_text)?;
        m.write(&self.out)
    }

    // ----- data -----

    fn write_dataset(&self, mut m: Manifest, ds: &Dataset, groups: Option<&[usize]>) -> Result<String> {
        self.emit(&mut m, INTERACTIONS, &formats::format_interactions(ds))?;
        if let Some(groups) = groups {
            let mut s = String::from("user_id\tgroup\n");
            for u in 0..ds.n_users() {
                let raw = ds.user_id(u);
                let _ = writeln!(s, "{raw}\t{}", groups[raw as usize]);
            }
            self.emit(&mut m, "data/groups.tsv", &s)?;
        }
        self.finish(m)?;
        Ok(format!(
            "data: {} markets, {} users, {} items, {} interactions",
            ds.n_markets(),
            ds.n_users(),
            ds.n_items(),
            ds.interactions().len()
        ))
    }

    pub fn synth(&self) -> Result<String> {
        let (ds, groups) = generate_synthetic(&self.config.synth(), self.config.seed())?;
        self.write_dataset(self.manifest("data"), &ds, Some(&groups))
    }

    pub fn ingest(&self) -> Result<String> {
        let source = Path::new(&self.config.data.source);
        if self.config.data.source == "synth" {
            return Err(CliError::config("data.source", "ingest needs a file path, not `synth`"));
        }
        let format = Format::from_tag(&self.config.data.format).expect("validated");
        let mut m = self.manifest("data");
        for f in formats::interaction_files(source, format)? {
            m.external_input(&f)?;
        }
        let ds = formats::load_interactions(source, format)?;
        self.write_dataset(m, &ds, None)
    }

    /// `synth` or `ingest`, depending on `data.source`.
    pub fn data(&self) -> Result<String> {
        if self.config.data.source == "synth" {
            self.synth()
        } else {
            self.ingest()
        }
    }

    fn load_split(&self, m: &mut Manifest) -> Result<SplitDataset> {
        Manifest::require(&self.out, "data")?;
        m.input(&self.out, INTERACTIONS)?;
        let raw = formats::load_interactions(&self.path(INTERACTIONS), Format::Tsv)?;
        Ok(prepare(&raw, &self.pipeline)?)
    }

    // ----- graphs -----

    pub fn graphs(&self) -> Result<String> {
        let mut m = self.manifest("graphs");
        let split = self.load_split(&mut m)?;
        let train = &split.train;
        let graphs = build_graphs(train, &self.pipeline)?;
        let (e, i) = formats::format_graph(&graphs.user, |u| train.user_id(u));
        let (fe, fi) = user_graph_files();
        self.emit(&mut m, &fe, &e)?;
        self.emit(&mut m, &fi, &i)?;
        let mut summary = format!(
            "graphs: user graph {} nodes / {} edges",
            graphs.user.n_nodes(),
            graphs.user.edge_count()
        );
        for (market, g) in &graphs.items {
            let (e, i) = formats::format_graph(g, |j| train.item_id(j));
            let (fe, fi) = item_graph_files(market.as_str());
            self.emit(&mut m, &fe, &e)?;
            self.emit(&mut m, &fi, &i)?;
            let _ = write!(summary, "; {market} {} / {}", g.n_nodes(), g.edge_count());
        }
        let mut test = String::from("market\tuser_id\titem_id\n");
        for c in &split.test {
            let _ = writeln!(test, "{}\t{}\t{}", train.markets()[c.market], train.user_id(c.user), train.item_id(c.item));
        }
        self.emit(&mut m, "graphs/test.tsv", &test)?;
        self.finish(m)?;
        Ok(summary)
    }

    fn load_graphs(&self, m: &mut Manifest, train: &Dataset) -> Result<Graphs> {
        Manifest::require(&self.out, "graphs")?;
        let read = |m: &mut Manifest, (fe, fi): (String, String), dense: &dyn Fn(u64) -> Option<usize>| {
            m.input(&self.out, &fe)?;
            m.input(&self.out, &fi)?;
            let edges = formats::read_text(&self.path(&fe))?;
            let index = formats::read_text(&self.path(&fi))?;
            formats::parse_graph(&edges, &index, dense, &self.path(&fe))
        };
        let user = read(m, user_graph_files(), &|raw| train.user_index(raw))?;
        let mut items = Vec::with_capacity(train.n_markets());
        for market in train.markets() {
            let g = read(m, item_graph_files(market.as_str()), &|raw| train.item_index(raw))?;
            items.push((market.clone(), g));
        }
        Ok(Graphs { user, items })
    }

    // ----- embed -----

    pub fn embed(&self) -> Result<String> {
        let mut m = self.manifest("embed");
        let split = self.load_split(&mut m)?;
        let train = &split.train;
        let graphs = self.load_graphs(&mut m, train)?;
        let cfg = &self.pipeline;
        let (user, items) = self.pool.install(|| {
            rayon::join(
                || embed_user_graph(&graphs, cfg),
                || {
                    graphs
                        .items
                        .par_iter()
                        .map(|(market, g)| embed_item_graph(market, g, cfg))
                        .collect::<dgre_core::Result<Vec<_>>>()
                },
            )
        });
        let emb = GraphEmbeddings {
            user: user?,
            items: items?,
        };

        let node_user = |g: &dgre_core::graph::InteractionGraph, k: usize| train.user_id(g.node_id(k));
        let node_item = |g: &dgre_core::graph::InteractionGraph, k: usize| train.item_id(g.node_id(k));
        self.emit(&mut m, "embed/user.tsv", &formats::format_embeddings(&emb.user.embeddings, |k| node_user(&graphs.user, k)))?;
        let mut state = Bundle::new("embeddings", Value::Null);
        let user_meta = bundle::push_embedding(&mut state, "user", &emb.user);
        let mut item_meta = Vec::new();
        for ((market, g), e) in graphs.items.iter().zip(&emb.items) {
            let rel = format!("embed/item_{market}.tsv");
            self.emit(&mut m, &rel, &formats::format_embeddings(&e.embeddings, |k| node_item(g, k)))?;
            let meta = bundle::push_embedding(&mut state, &format!("item_{market}"), e);
            item_meta.push(json!({"market": market.as_str(), "meta": meta}));
        }
        state.meta = json!({"user": user_meta, "items": item_meta});
        self.emit_bundle(&mut m, EMBED_STATE, &state)?;
        for (market, e) in graphs.items.iter().map(|(mk, _)| mk).zip(&emb.items) {
            if e.untrained {
                m.notes.push(format!("item graph of `{market}` has no edges; embeddings are untrained"));
            }
        }
        let summary = format!(
            "embed: user loss {:.4} -> {:.4}, {} item graphs",
            emb.user.loss_trace.first().copied().unwrap_or(f64::NAN),
            emb.user.loss_trace.last().copied().unwrap_or(f64::NAN),
            emb.items.len()
        );
        self.finish(m)?;
        Ok(summary)
    }

    fn load_embeddings(&self, m: &mut Manifest, graphs: &Graphs) -> Result<GraphEmbeddings> {
        Manifest::require(&self.out, "embed")?;
        m.input(&self.out, EMBED_STATE)?;
        let path = self.path(EMBED_STATE);
        let b = Bundle::read(&path, "embeddings")?;
        let bad = bad_state(&path);
        let user = bundle::read_embedding(&b, "user", &b.meta["user"]).map_err(&bad)?;
        let metas = b.meta["items"].as_array().ok_or_else(|| bad("missing item metadata".into()))?;
        let mut items = Vec::with_capacity(graphs.items.len());
        for (market, g) in &graphs.items {
            let meta = metas
                .iter()
                .find(|v| v["market"] == market.as_str())
                .ok_or_else(|| bad(format!("no embeddings for market `{market}`")))?;
            let e: TrainedEmbedding = bundle::read_embedding(&b, &format!("item_{market}"), &meta["meta"]).map_err(&bad)?;
            if e.embeddings.len() != g.n_nodes() {
                return Err(bad(format!("market `{market}`: {} rows for {} nodes", e.embeddings.len(), g.n_nodes())));
            }
            items.push(e);
        }
        if user.embeddings.len() != graphs.user.n_nodes() {
            return Err(bad("user embeddings do not match the user graph".into()));
        }
        Ok(GraphEmbeddings { user, items })
    }

    fn market_prototypes(&self, graphs: &Graphs, emb: &GraphEmbeddings) -> MarketResults {
        self.pool.install(|| {
            graphs
                .items
                .par_iter()
                .zip(&emb.items)
                .map(|((market, g), e)| (market.clone(), market_prototype(market, g, &e.embeddings, &self.pipeline)))
                .collect()
        })
    }

    // ----- prototypes -----

    pub fn prototypes(&self) -> Result<String> {
        let mut m = self.manifest("prototypes");
        let split = self.load_split(&mut m)?;
        let train = &split.train;
        let graphs = self.load_graphs(&mut m, train)?;
        let emb = self.load_embeddings(&mut m, &graphs)?;
        let partition = detect_communities(&graphs.user);
        let users = build_user_prototypes(&graphs, &emb.user.embeddings, &partition, &self.pipeline)?;
        let protos = Prototypes {
            users,
            markets: self.market_prototypes(&graphs, &emb),
        };
        let inputs = head_inputs(train, &protos, &self.pipeline)?;

        let uid = |u: usize| train.user_id(u);
        self.emit(&mut m, "prototypes/user_prototypes.tsv", &formats::format_prototypes(&protos.users.prototypes, uid))?;
        self.emit(&mut m, "prototypes/assignments.tsv", &formats::format_assignments(&protos.users.assignment.w, uid))?;
        let mut comm = String::new();
        for (u, c) in partition.assignment.iter().enumerate() {
            let _ = writeln!(comm, "{}\t{c}", uid(u));
        }
        self.emit(&mut m, "prototypes/communities.tsv", &comm)?;
        let ok: Vec<_> = protos.markets.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        let (vectors, selected) = formats::format_market_prototypes(ok.iter().copied(), |j| train.item_id(j));
        self.emit(&mut m, "prototypes/market_prototypes.tsv", &vectors)?;
        self.emit(&mut m, "prototypes/market_items.tsv", &selected)?;
        for (market, e) in protos.market_failures() {
            m.notes.push(format!("market `{market}`: prototype unavailable ({e}); its gate is all ones"));
        }

        let mut state = Bundle::new("head_inputs", Value::Null);
        let ctx_meta = bundle::push_context(&mut state, "ctx", &inputs.ctx);
        state.push("p_init", &inputs.p_init);
        state.push("q_init", &inputs.q_init);
        state.meta = json!({"ctx": ctx_meta});
        self.emit_bundle(&mut m, PROTO_STATE, &state)?;
        let summary = format!(
            "prototypes: {} communities, {} user prototypes, {} of {} market prototypes",
            partition.n_communities,
            protos.users.prototypes.len(),
            ok.len(),
            protos.markets.len()
        );
        self.finish(m)?;
        Ok(summary)
    }

    fn load_inputs(&self, m: &mut Manifest, train: &Dataset) -> Result<HeadInputs> {
        Manifest::require(&self.out, "prototypes")?;
        m.input(&self.out, PROTO_STATE)?;
        let path = self.path(PROTO_STATE);
        let b = Bundle::read(&path, "head_inputs")?;
        let bad = bad_state(&path);
        let ctx = bundle::read_context(&b, "ctx", &b.meta["ctx"]).map_err(&bad)?;
        if ctx.n_users() != train.n_users() || ctx.n_markets() != train.n_markets() {
            return Err(bad("prototype context does not match the dataset".into()));
        }
        Ok(HeadInputs {
            ctx,
            p_init: b.tensor("p_init").map_err(&bad)?.clone(),
            q_init: b.tensor("q_init").map_err(&bad)?.clone(),
        })
    }

    // ----- train / eval -----

    pub fn train(&self) -> Result<String> {
        let mut m = self.manifest("train");
        let split = self.load_split(&mut m)?;
        let inputs = self.load_inputs(&mut m, &split.train)?;
        let kind = self.pipeline.head_kind;
        let head = train_kind(kind, &split.train, &inputs, &self.pipeline)?;
        let ctx = if kind.variant == Variant::Dgre {
            inputs.ctx.clone()
        } else {
            inputs.ctx.with_flags(false, false)
        };
        self.emit_bundle(&mut m, MODEL, &bundle::checkpoint(&head, &ctx))?;
        let mut loss = String::from("epoch\tloss\n");
        for (e, l) in head.loss_trace.iter().enumerate() {
            let _ = writeln!(loss, "{}\t{}", e + 1, formats::sig9(*l));
        }
        self.emit(&mut m, "train/loss.tsv", &loss)?;
        self.finish(m)?;
        Ok(format!(
            "train: {kind}, loss {:.4} -> {:.4}",
            head.loss_trace.first().copied().unwrap_or(f64::NAN),
            head.loss_trace.last().copied().unwrap_or(f64::NAN)
        ))
    }

    fn evaluate(&self, split: &SplitDataset, head: &TrainedHead, ctx: &PrototypeContext) -> Result<RankingMetrics> {
        let scorer = HeadScorer {
            params: &head.params,
            ctx,
        };
        let eval = self.pipeline.eval_config();
        let results = self.pool.install(|| {
            split
                .test
                .par_iter()
                .map(|case| evaluate_case(&scorer, split, case, &eval))
                .collect::<dgre_core::Result<Vec<_>>>()
        })?;
        Ok(aggregate(results, split.train.n_markets(), eval.k))
    }

    pub fn eval(&self) -> Result<String> {
        let mut m = self.manifest("eval");
        let split = self.load_split(&mut m)?;
        Manifest::require(&self.out, "train")?;
        m.input(&self.out, MODEL)?;
        let path = self.path(MODEL);
        let (head, ctx) = bundle::read_checkpoint(&Bundle::read(&path, "head")?).map_err(bad_state(&path))?;
        if head.params.n_users() != split.train.n_users() || head.params.n_items() != split.train.n_items() {
            return Err(CliError::format(&path, "checkpoint does not match the dataset"));
        }
        let metrics = self.evaluate(&split, &head, &ctx)?;
        let markets = split.train.markets();
        for &l in &metrics.omitted {
            m.notes.push(format!("market `{}` has no test users and is omitted", markets[l]));
        }
        self.emit(&mut m, RESULTS, &formats::format_results(&metrics, markets))?;
        self.finish(m)?;
        Ok(format!(
            "eval: {} HR@{k} {:.4} nDCG@{k} {:.4} over {} users",
            head.params.kind,
            metrics.overall.hr,
            metrics.overall.ndcg,
            metrics.overall.n_users,
            k = metrics.k
        ))
    }

    // ----- ablations -----

    pub fn ablate(&self) -> Result<String> {
        let mut m = self.manifest("ablate");
        let split = self.load_split(&mut m)?;
        let graphs = self.load_graphs(&mut m, &split.train)?;
        let embeddings = self.load_embeddings(&mut m, &graphs)?;
        let inputs = self.load_inputs(&mut m, &split.train)?;
        let markets = self.market_prototypes(&graphs, &embeddings);
        let up = Upstream {
            partition: detect_communities(&graphs.user),
            split,
            graphs,
            embeddings,
            markets,
        };
        let cfg = &self.pipeline;
        let ks = &self.config.eval.ablate_k;
        let (k_rows, e_rows) = self.pool.install(|| {
            rayon::join(
                || {
                    ks.par_iter()
                        .map(|&k| ablate_k(&up, cfg, &[k]).map(|mut v| v.remove(0)))
                        .collect::<dgre_core::Result<Vec<_>>>()
                },
                || ablate_embeddings(&up.split, &inputs, cfg),
            )
        });
        let (k_rows, e_rows) = (k_rows?, e_rows?);
        let market_ids = up.split.train.markets();

        let mut kt = String::from("k_proto\tmarket\tmetric\tk_cutoff\tvalue\tn_users\n");
        for r in &k_rows {
            kt.push_str(&formats::metric_rows(&format!("{}\t", r.k), &r.metrics, market_ids));
        }
        self.emit(&mut m, ABLATE_K, &kt)?;
        let mut et = String::from("setting\tmarket\tmetric\tk_cutoff\tvalue\tn_users\n");
        for r in &e_rows {
            et.push_str(&formats::metric_rows(&format!("{}\t", r.setting.name()), &r.metrics, market_ids));
        }
        self.emit(&mut m, ABLATE_EMBEDDINGS, &et)?;

        let best = best_k(&k_rows);
        m.notes.push(format!("best k_proto by pooled nDCG: {best}"));
        let settings: Vec<String> = e_rows
            .iter()
            .map(|r| format!("{} {:.4}", r.setting.name(), r.metrics.overall.ndcg))
            .collect();
        self.finish(m)?;
        Ok(format!("ablate: best k_proto {best}; pooled nDCG {}", settings.join(", ")))
    }

    /// Every stage in order; `ablate` is skipped when `with_ablate` is false.
    pub fn all(&self, with_ablate: bool) -> Result<Vec<String>> {
        let mut out = vec![self.data()?, self.graphs()?, self.embed()?, self.prototypes()?, self.train()?, self.eval()?];
        if with_ablate {
            out.push(self.ablate()?);
        }
        Ok(out)
    }
}

type MarketResults = Vec<(dgre_core::data::MarketId, dgre_core::Result<dgre_core::market_proto::MarketPrototype>)>;

/// `k_proto` with the highest pooled nDCG; ties go to the smaller k.
pub fn best_k(rows: &[dgre_core::pipeline::KRow]) -> usize {
    let mut best: Option<&dgre_core::pipeline::KRow> = None;
    for r in rows {
        let better = match best {
            None => true,
            Some(b) => r.metrics.overall.ndcg > b.metrics.overall.ndcg || (r.metrics.overall.ndcg == b.metrics.overall.ndcg && r.k < b.k),
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.k).unwrap_or(0)
}
